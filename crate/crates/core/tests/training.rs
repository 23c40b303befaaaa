use std::fs;
use std::path::{Path, PathBuf};

use ape_core::checkpoint::Checkpoint;
use ape_core::eval::dataset_recall;
use ape_core::store::{
    gen_synthetic, write_index_list, Dataset, EmbeddingShard, MixtureSource, MixtureSpec,
    SyntheticSpec,
};
use ape_core::trainer::{
    read_metrics, resume, train, RunState, TrainConfig, CHECKPOINT_DIR, CONFIG_FILE,
    LAST_CHECKPOINT, METRICS_FILE, SEEDS_FILE, SUBSET_DIR,
};
use ape_core::eval::RecallDirection;
use ape_core::Error;

fn write_data(dir: &Path, spec: &SyntheticSpec) -> (PathBuf, PathBuf) {
    let d = gen_synthetic(spec).unwrap();
    let (tr, te) = (dir.join("train.apes"), dir.join("test.apes"));
    d.train.write(&tr).unwrap();
    d.test.write(&te).unwrap();
    (tr, te)
}

fn small_config(dir: &Path) -> TrainConfig {
    let mut spec = SyntheticSpec::new(6, 16, 5, 256, 64);
    spec.noise = 0.05;
    spec.nonlinear = true;
    spec.min_len = Some(2);
    spec.seed = 21;
    let (tr, te) = write_data(dir, &spec);
    let mut c = TrainConfig::new(vec![tr], 32, 60, 3e-3);
    c.data.validation = Some(te);
    c.warmup = 5;
    c.eval_every = 10;
    c.checkpoint_every = Some(20);
    c.head.layers = 2;
    c.head.image_head = true;
    c.accumulation = 2;
    c.strict = true;
    c
}

fn checkpoints(run: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(run.join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn linear_task_is_solved_by_one_layer() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(16, 64, 4, 512, 0);
    let d = gen_synthetic(&spec).unwrap();
    let tr = dir.path().join("train.apes");
    d.train.write(&tr).unwrap();
    let mut c = TrainConfig::new(vec![tr.clone()], 64, 200, 3e-2);
    c.warmup = 10;
    c.eval_every = 20;
    c.weight_decay = 0.0;
    c.head.layers = 1;
    c.strict = true;
    let run = dir.path().join("run");
    let out = train(&c, &run).unwrap();
    let last = out.last_record.unwrap();
    assert_eq!(last.step, 200);
    let loss = last.train_loss.unwrap();
    assert!(loss < 0.01, "train loss {loss}");

    let head = Checkpoint::read(&out.last_checkpoint).unwrap().head;
    let data = Dataset::from_shards(vec![EmbeddingShard::read(&tr).unwrap()]).unwrap();
    let r = dataset_recall(&head, &data, &[1], RecallDirection::ImageToText).unwrap();
    assert_eq!(r[0], 1.0);
}

#[test]
fn training_leaves_input_shards_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let inputs = [c.data.train[0].clone(), c.data.validation.clone().unwrap()];
    let before: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();
    train(&c, &dir.path().join("run")).unwrap();
    let after: Vec<Vec<u8>> = inputs.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn run_directory_is_self_describing() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let run = dir.path().join("run");
    train(&c, &run).unwrap();
    let recorded = TrainConfig::read(&run.join(CONFIG_FILE)).unwrap();
    // derived head widths are pinned; everything given is kept
    assert_eq!(recorded.head.d_out, Some(16));
    assert_eq!(recorded.head.hidden, Some(32));
    assert_eq!((recorded.seed, recorded.steps, recorded.lr), (c.seed, c.steps, c.lr));
    let seeds: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join(SEEDS_FILE)).unwrap()).unwrap();
    assert!(seeds.is_object());
    let steps: Vec<u64> = read_metrics(&run.join(METRICS_FILE))
        .unwrap()
        .iter()
        .map(|r| r.step)
        .collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 40, 50, 60]);
    let names: Vec<String> = checkpoints(&run).into_iter().map(|(n, _)| n).collect();
    for want in ["step-00000000.apec", "step-00000020.apec", "step-00000060.apec", LAST_CHECKPOINT] {
        assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
    }

    // retraining from the recorded config alone reproduces the run
    let again = dir.path().join("again");
    train(&recorded, &again).unwrap();
    assert_eq!(
        fs::read(run.join(METRICS_FILE)).unwrap(),
        fs::read(again.join(METRICS_FILE)).unwrap()
    );
    assert_eq!(checkpoints(&run), checkpoints(&again));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let whole = dir.path().join("whole");
    train(&c, &whole).unwrap();

    let mut interrupted = c.clone();
    interrupted.stop_after = Some(30);
    let split = dir.path().join("split");
    let first = train(&interrupted, &split).unwrap();
    assert!(first.stopped_early);
    assert_eq!(first.step, 30);
    let state: RunState = serde_json::from_str(
        &Checkpoint::read(&split.join(CHECKPOINT_DIR).join(LAST_CHECKPOINT))
            .unwrap()
            .run_state,
    )
    .unwrap();
    assert_eq!(state.step, 30);

    let out = resume(&split, Some(&c)).unwrap();
    assert_eq!(out.step, 60);
    assert_eq!(
        fs::read(whole.join(METRICS_FILE)).unwrap(),
        fs::read(split.join(METRICS_FILE)).unwrap()
    );
    // the interrupted run also holds the checkpoint it stopped at
    let mut split_ckpts = checkpoints(&split);
    let extra = split_ckpts.iter().position(|(n, _)| n == "step-00000030.apec").unwrap();
    split_ckpts.remove(extra);
    assert_eq!(checkpoints(&whole), split_ckpts);
}

#[test]
fn non_strict_runs_record_wall_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.strict = false;
    let run = dir.path().join("run");
    train(&c, &run).unwrap();
    let times: Vec<f64> = read_metrics(&run.join(METRICS_FILE))
        .unwrap()
        .iter()
        .map(|r| r.wall_time_s.unwrap())
        .collect();
    assert_eq!(times[0], 0.0);
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "{times:?}");
}

#[test]
fn divergence_is_a_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    c.lr = 1e30;
    c.warmup = 0;
    let err = train(&c, &dir.path().join("run")).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(err.to_string().contains(LAST_CHECKPOINT), "{err}");
}

#[test]
fn mixture_records_its_subsets() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small_config(dir.path());
    let mut spec = SyntheticSpec::new(6, 16, 5, 100, 0);
    spec.seed = 99;
    let other = dir.path().join("other.apes");
    gen_synthetic(&spec).unwrap().train.write(&other).unwrap();
    let ids: Vec<u64> = EmbeddingShard::read(&other)
        .unwrap()
        .records
        .iter()
        .take(40)
        .map(|r| r.sample_id)
        .collect();
    let list = dir.path().join("keep.txt");
    write_index_list(&list, &ids).unwrap();
    c.data.mixture = Some(MixtureSpec {
        sources: vec![
            MixtureSource {
                shards: c.data.train.clone(),
                weight: 3,
                index_list: None,
            },
            MixtureSource {
                shards: vec![other],
                weight: 1,
                index_list: Some(list),
            },
        ],
        epoch_size: Some(200),
    });
    c.data.train.clear();
    let run = dir.path().join("run");
    train(&c, &run).unwrap();
    let counts: Vec<usize> = (0..2)
        .map(|i| {
            fs::read_to_string(run.join(SUBSET_DIR).join(format!("source-{i}.txt")))
                .unwrap()
                .lines()
                .count()
        })
        .collect();
    assert_eq!(counts, vec![150, 50]);
}
