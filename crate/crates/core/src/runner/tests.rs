use super::*;

fn tiny_toml(out: &Path, stages: &str, extra: &str) -> String {
    format!(
        r#"
name = "tiny"
task = "classification"
max_len = 16
stages = {stages}
seeds = [0, 1]
out_dir = "{}"

[data.synth_classification]
n_train = 60
n_dev = 20
n_test = 20
vocab_size = 30

[teacher]
family = "transformer"
attn_heads = 2
layers = 1
embed_dim = 16

[[students]]
name = "cnn"
[students.spec]
family = "cnn"
embed_dim = 8
n_blocks = 1
kernel_size = 3

[distill]
max_epochs = 3
patience = 2
lr = 0.003
{extra}
"#,
        out.display()
    )
}

#[test]
fn minimal_config_parses_with_defaults() {
    let cfg = ExperimentConfig::from_toml_str(&tiny_toml(Path::new("o"), r#"["vanilla", "kd"]"#, "")).unwrap();
    assert_eq!(cfg.students.len(), 1);
    assert_eq!(cfg.stages, vec![Stage::Vanilla, Stage::Kd]);
    assert_eq!(cfg.embeddings, EmbeddingSource::None);
    assert_eq!(cfg.export.precisions, vec![Precision::F32]);
    assert_eq!(cfg.teacher_config(), &cfg.distill);
}

#[test]
fn round_trip_is_semantically_equal() {
    let text = tiny_toml(
        Path::new("o"),
        r#"["vanilla", "kd", "kd_ulb", "kd_ulb_embed"]"#,
        r#"
[pool]
length_filter = "q1_q3"
balance = { strategy = "target_oversample", n = 40 }
synth = { n = 50, seed = 9, min_len = 3, max_len = 20 }

[embeddings]
source = "vectors_file"
path = "vec.txt"

[bench]
lengths = [4, 8]
iterations = 3
warmup = 1
"#,
    );
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(again, cfg);
}

fn config_key(text: &str) -> String {
    match ExperimentConfig::from_toml_str(text) {
        Err(Error::Config { key, .. }) => key,
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn kd_ulb_without_pool_names_pool() {
    assert_eq!(config_key(&tiny_toml(Path::new("o"), r#"["kd_ulb"]"#, "")), "pool");
}

#[test]
fn kd_ulb_embed_without_source_names_embeddings() {
    let extra = "[pool]\nfiles = [\"p.txt\"]\n";
    assert_eq!(config_key(&tiny_toml(Path::new("o"), r#"["kd_ulb_embed"]"#, extra)), "embeddings");
}

#[test]
fn unknown_and_mistyped_keys_are_named() {
    let text = tiny_toml(Path::new("o"), r#"["kd"]"#, "").replace("patience = 2", "patince = 2");
    assert!(config_key(&text).starts_with("distill"));
    let text = tiny_toml(Path::new("o"), r#"["kd"]"#, "").replace("max_len = 16", "max_len = \"long\"");
    assert_eq!(config_key(&text), "max_len");
    let text = tiny_toml(Path::new("o"), r#"["kd"]"#, "").replace("seeds = [0, 1]", "seeds = []");
    assert_eq!(config_key(&text), "seeds");
    let text = tiny_toml(Path::new("o"), r#"["kd"]"#, "").replace("task = \"classification\"", "");
    assert_eq!(config_key(&text), "<root>");
}

#[test]
fn bad_student_spec_is_named() {
    let text = tiny_toml(Path::new("o"), r#"["kd"]"#, "").replace("kernel_size = 3", "kernel_size = 0");
    assert_eq!(config_key(&text), "students[0].spec");
}

#[test]
fn run_writes_rows_summary_and_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(&tiny_toml(dir.path(), r#"["kd", "vanilla"]"#, "")).unwrap();
    let runner = Runner::new(cfg).unwrap();
    let summary = runner.run().unwrap();
    let rows = read_results(dir.path()).unwrap();
    let students: Vec<&ResultRow> = rows.iter().filter(|r| r.model == "cnn").collect();
    assert_eq!(students.len(), 4);
    assert!(rows.iter().all(|r| r.config_hash == runner.config_hash() && r.dataset_hash.len() == 16));
    let table: Vec<&str> = summary.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Model")).collect();
    assert_eq!(table.len(), 3);
    assert!(table[0].starts_with("| teacher | Teacher |"));
    assert!(table[1].starts_with("| cnn | Vanilla |"));
    assert!(table[2].starts_with("| cnn | KD |"));
    for stem in ["teacher_s0", "teacher_s1", "cnn_kd_s0", "cnn_vanilla_s1"] {
        assert!(dir.path().join(format!("models/{stem}.f32.kdfz")).is_file(), "{stem}");
    }
    assert_eq!(fs::read_to_string(dir.path().join("summary.md")).unwrap(), summary);
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(write_summary(dir.path()).is_err());
    fs::create_dir(dir.path().join("results")).unwrap();
    assert!(write_summary(dir.path()).is_err());
}

#[test]
fn summary_orders_stages_by_ladder() {
    let row = |model: &str, stage: &str, f1: f32| ResultRow {
        model: model.into(),
        stage: stage.into(),
        loss_mode: "mse".into(),
        lr: 1e-3,
        seed: 0,
        dev_f1: f1,
        test_f1: f1,
        best_epoch: 1,
        steps_to_best: 1,
        pool_size: 1,
        config_hash: String::new(),
        dataset_hash: String::new(),
    };
    let rows = vec![
        row("bilstm", "kd_ulb_embed", 0.5),
        row("bilstm", "vanilla", 0.2),
        row("bilstm", "kd", 0.3),
        row("bilstm", "kd", 0.5),
        row("teacher", "teacher", 0.9),
    ];
    let s = summarize(&rows).unwrap();
    let lines: Vec<&str> = s.lines().skip(2).collect();
    assert!(lines[0].starts_with("| teacher | Teacher | 0.9000"));
    assert!(lines[1].starts_with("| bilstm | Vanilla |"));
    assert_eq!(lines[2], "| bilstm | KD | 0.4000 | 0.1000 | 0.4000 | 2 |");
    assert!(lines[3].starts_with("| bilstm | KD Ulb + embeddings |"));
}

#[test]
fn content_hash_depends_on_bytes_only() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("train.csv");
    fs::write(&a, "text,label\nx,y\n").unwrap();
    let h1 = content_hash(std::slice::from_ref(&a)).unwrap();
    let e = tempfile::tempdir().unwrap();
    let b = e.path().join("train.csv");
    fs::write(&b, "text,label\nx,y\n").unwrap();
    assert_eq!(content_hash(std::slice::from_ref(&b)).unwrap(), h1);
    fs::write(&b, "text,label\nx,z\n").unwrap();
    assert_ne!(content_hash(&[b]).unwrap(), h1);
}
