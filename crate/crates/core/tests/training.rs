use anyhow::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use secousti::frontend::{gen_synthetic_corpus, SynthOptions, Utterance};
use secousti::model::is_stage1;
use secousti::trainer::{
    load_checkpoint, loss_weights, read_checkpoint, save_checkpoint, stage2_graph, train_step,
    write_checkpoint, GraphOptions, TrainState,
};
use secousti::{CodecConfig, RunConfig, ScheduleConfig};

fn small_run() -> RunConfig {
    let mut codec = CodecConfig::desk();
    codec.n_mels = 12;
    codec.model_dim = 8;
    codec.heads = 2;
    codec.ffn = 12;
    codec.conv_channels = 4;
    codec.acous_dim = 6;
    codec.joint_dim = 6;
    codec.para_dim = 4;
    codec.para_channels = 4;
    codec.para_frames = 16;
    RunConfig {
        codec,
        schedule: ScheduleConfig {
            stage1_end: 3,
            kl_start_para: 4,
            kl_end_para: 6,
            kl_start_sem: 4,
            kl_end_sem: 6,
            total_steps: 8,
            batch_size: 2,
            ..ScheduleConfig::desk()
        },
    }
}

fn corpus(run: &RunConfig) -> Result<Vec<Utterance>> {
    let opts = SynthOptions {
        phonemes: (3, 6),
        keep_waveform: false,
        ..SynthOptions::default()
    };
    Ok(gen_synthetic_corpus(5, 5, &run.codec, &opts)?)
}

#[test]
fn stage_two_never_touches_stage_one() -> Result<()> {
    let run = small_run();
    let data = corpus(&run)?;
    let mut st = TrainState::<f64>::new(run.clone(), 2)?;
    for _ in 0..3 {
        train_step(&mut st, &data)?;
    }
    let frozen = st.stage1_checksum();
    for _ in 0..5 {
        let r = train_step(&mut st, &data)?;
        assert_eq!(r.stage, 2);
        assert!(r.acoustic > 0.0 && r.contrastive > 0.0);
    }
    assert_eq!(st.stage1_checksum(), frozen);

    // with stage-1 parameters registered as trainable, their gradients are zero
    let batch: Vec<&Utterance> = data.iter().take(2).collect();
    let w = loss_weights(7, &run.schedule);
    let opts = GraphOptions {
        stage1_trainable: true,
        ..GraphOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sg = stage2_graph(&st.codec, &batch, &w, &mut rng, opts)?;
    let grads = sg.graph.backward(sg.total)?;
    let mut seen = 0;
    for name in st.codec.params.names().filter(|n| is_stage1(n)) {
        if let Some(g) = grads.param(name) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} receives gradient");
            seen += 1;
        }
    }
    assert!(seen > 0);
    Ok(())
}

#[test]
fn training_is_deterministic() -> Result<()> {
    let run = small_run();
    let data = corpus(&run)?;
    let mut a = TrainState::<f32>::new(run.clone(), 9)?;
    let mut b = TrainState::<f32>::new(run, 9)?;
    for _ in 0..6 {
        assert_eq!(train_step(&mut a, &data)?, train_step(&mut b, &data)?);
    }
    assert_eq!(write_checkpoint(&a), write_checkpoint(&b));
    Ok(())
}

#[test]
fn resume_matches_uninterrupted_run() -> Result<()> {
    let run = small_run();
    let data = corpus(&run)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("mid.ckpt");

    let mut straight = TrainState::<f32>::new(run.clone(), 4)?;
    for _ in 0..8 {
        train_step(&mut straight, &data)?;
    }

    let mut first = TrainState::<f32>::new(run, 4)?;
    for _ in 0..5 {
        train_step(&mut first, &data)?;
    }
    save_checkpoint(&first, &path)?;
    let mut resumed = load_checkpoint::<f32>(&path)?;
    assert_eq!(resumed.step, 5);
    for _ in 0..3 {
        train_step(&mut resumed, &data)?;
    }
    assert_eq!(resumed.history, straight.history);
    assert_eq!(write_checkpoint(&resumed), write_checkpoint(&straight));
    Ok(())
}

#[test]
fn damaged_checkpoints_are_rejected() -> Result<()> {
    let run = small_run();
    let st = TrainState::<f64>::new(run, 1)?;
    let bytes = write_checkpoint(&st);
    for cut in [0, 3, 5, 40, bytes.len() / 2, bytes.len() - 1] {
        assert!(read_checkpoint::<f64>(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(read_checkpoint::<f64>(&extra).is_err());
    let mut magic = bytes.clone();
    magic[1] = b'X';
    assert!(read_checkpoint::<f64>(&magic).is_err());
    let dir = tempfile::tempdir()?;
    assert!(load_checkpoint::<f64>(&dir.path().join("missing.ckpt")).is_err());

    // a checkpoint stored at f64 loads at f32 with the same configuration
    let narrow = read_checkpoint::<f32>(&bytes)?;
    assert_eq!(narrow.run, st.run);
    Ok(())
}
