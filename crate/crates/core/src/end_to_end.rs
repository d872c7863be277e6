use std::path::{Path, PathBuf};

use vesselnet::data::synthetic::synthetic_dataset;
use vesselnet::data::{save_sample, Split};
use vesselnet::ensemble::{load_model, ProbabilityMap};
use vesselnet::eval::{Report, RocCurve};

struct Output {
    code: u8,
    stdout: Vec<u8>,
    stderr: Vec<u8>,
}

impl Output {
    fn success(&self) -> bool {
        self.code == 0
    }
}

fn run(args: &[&str]) -> Output {
    let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
    let argv = std::iter::once("vesselnet").chain(args.iter().copied());
    let code = vesselnet::cli::run(argv, &mut stdout, &mut stderr);
    Output {
        code,
        stdout,
        stderr,
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small on-disk dataset: training 21–22 and test 01–02 at 32×32.
fn dataset(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    let (train, test) = synthetic_dataset(32, 5);
    for s in train.iter().filter(|s| s.id() <= 22) {
        save_sample(&root, Split::Training, s, false).unwrap();
    }
    for s in test.iter().filter(|s| s.id() <= 2) {
        save_sample(&root, Split::Test, s, false).unwrap();
    }
    root
}

const SMALL: [&str; 10] = [
    "--set",
    "k=2",
    "--set",
    "patches_per_model=60",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=30",
    "--set",
    "train_ids=21-22",
];

fn train(data: &Path, out: &Path, threads: &str) -> Output {
    let mut args = vec![
        "--threads",
        threads,
        "train",
        "--quiet",
        "--data",
        data.to_str().unwrap(),
    ];
    args.extend(["--out", out.to_str().unwrap()]);
    args.extend(SMALL);
    run(&args)
}

fn no_temp_files(dir: &Path) -> bool {
    std::fs::read_dir(dir)
        .unwrap()
        .all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp"))
}

#[test]
fn train_predict_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let model = tmp.path().join("m.vnet");
    let o = train(&data, &model, "1");
    assert!(o.success(), "{}", stderr(&o));
    assert_eq!(load_model(&model).unwrap().k(), 2);
    let log = std::fs::read_to_string(tmp.path().join("m.log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "member,epoch,loss,train_accuracy,learning_rate");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,1,") && rows[2].starts_with("1,1,"));

    let pred = tmp.path().join("pred");
    let args = [
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    let o = run(&[
        &args[..],
        &["--out", pred.to_str().unwrap(), "--ids", "01-02"],
    ]
    .concat());
    assert!(o.success(), "{}", stderr(&o));
    for id in ["01", "02"] {
        let map = ProbabilityMap::load(&pred.join(format!("{id}.pmap"))).unwrap();
        assert_eq!((map.width(), map.height()), (32, 32));
        assert!(map.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(pred.join(format!("{id}.png")).is_file());
    }
    let again = tmp.path().join("again");
    let o = run(&[
        &args[..],
        &["--out", again.to_str().unwrap(), "--ids", "01-02"],
    ]
    .concat());
    assert!(o.success());
    for id in ["01", "02"] {
        let name = format!("{id}.pmap");
        assert_eq!(
            std::fs::read(pred.join(&name)).unwrap(),
            std::fs::read(again.join(&name)).unwrap()
        );
    }

    let report = tmp.path().join("report.csv");
    let o = run(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--ids",
        "1-2",
    ]);
    assert!(o.success(), "{}", stderr(&o));
    let line = stdout(&o);
    let parsed = Report::parse_csv(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(line.trim(), parsed.summary_line());
    assert!(
        line.starts_with("max_avg_accuracy=") && line.contains(" kappa=") && line.contains(" auc=")
    );
    assert_eq!(parsed.per_image.len(), 2);
    let curve =
        RocCurve::parse_csv(&std::fs::read_to_string(tmp.path().join("roc.csv")).unwrap()).unwrap();
    assert!(curve.points.windows(2).all(|w| w[0].fpr <= w[1].fpr));
    assert!((curve.auc - parsed.auc).abs() < 1e-6);

    let roc_out = tmp.path().join("only_roc.csv");
    let o = run(&[
        "roc",
        "--pred",
        pred.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        roc_out.to_str().unwrap(),
        "--ids",
        "1-2",
    ]);
    assert!(o.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), format!("auc={:.6}", curve.auc));
    assert!(no_temp_files(tmp.path()) && no_temp_files(&pred));
}

#[test]
fn thread_count_does_not_change_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let (a, b) = (tmp.path().join("a.vnet"), tmp.path().join("b.vnet"));
    assert!(train(&data, &a, "1").success());
    assert!(train(&data, &b, "2").success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("log.csv")).unwrap(),
        std::fs::read(b.with_extension("log.csv")).unwrap()
    );
}

#[test]
fn perfect_predictions_score_one() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let pred = tmp.path().join("pred");
    std::fs::create_dir_all(&pred).unwrap();
    for s in vesselnet::data::load_split(&data, Split::Test, &[1, 2]).unwrap() {
        let values = s
            .truth()
            .iter()
            .zip(s.fov())
            .map(|(&t, &f)| f32::from(t * f))
            .collect();
        ProbabilityMap::new(s.width(), s.height(), values)
            .unwrap()
            .save(&pred.join(format!("{:02}.pmap", s.id())))
            .unwrap();
    }
    let report = tmp.path().join("r.csv");
    let o = run(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--ids",
        "1-2",
    ]);
    assert!(o.success(), "{}", stderr(&o));
    assert_eq!(
        stdout(&o).trim(),
        "max_avg_accuracy=1.000000 kappa=1.000000 auc=1.000000"
    );
}

#[test]
fn missing_dataset_exits_3_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.vnet");
    let o = train(&tmp.path().join("absent"), &model, "1");
    assert_eq!(o.code, 3, "{}", stderr(&o));
    assert!(!model.exists());
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 0);

    // a dataset with a missing file fails the same way
    let data = dataset(tmp.path());
    std::fs::remove_file(data.join("training/truth/22.png")).unwrap();
    let o = train(&data, &model, "1");
    assert_eq!(o.code, 3);
    assert!(stderr(&o).contains("22.png"));
    assert!(!model.exists() && no_temp_files(tmp.path()));
}

#[test]
fn config_handling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# short run\nk = 3\nepochs = 2\n").unwrap();
    let o = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "epochs=5",
        "--dry-run",
    ]);
    assert!(o.success());
    let text = stdout(&o);
    for line in [
        "k = 3",
        "epochs = 5",
        "patches_per_model = 60000",
        "batch_size = 200",
        "base_lr = 5e-4",
        "anneal = 0.95",
    ] {
        assert!(text.lines().any(|l| l == line), "{line} in\n{text}");
    }
    // dry-run output is itself a valid config
    std::fs::write(&cfg, &text).unwrap();
    let o2 = run(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(stdout(&o2), text);

    std::fs::write(&cfg, "k = 3\nbatch_size = lots\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--dry-run"]);
    assert_eq!(o.code, 2);
    assert!(stderr(&o).contains("line 2"));
    assert_eq!(
        run(&["train", "--dry-run", "--set", "l2_range=3e-3,1e-3"]).code,
        2
    );
    assert_eq!(run(&["train", "--dry-run", "--set", "bogus=1"]).code, 2);
    assert_eq!(run(&["--threads", "0", "train", "--dry-run"]).code, 2);
}

#[test]
fn help_documents_every_key() {
    for sub in ["train", "predict", "evaluate", "roc", "gradcheck"] {
        let o = run(&[sub, "--help"]);
        assert!(o.success());
        let text = stdout(&o);
        for key in vesselnet::cli::CONFIG_KEYS.map(|(k, _)| k) {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
        assert!(text.contains("published default"));
    }
}

#[test]
fn model_and_prediction_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(tmp.path());
    let bad = tmp.path().join("bad.vnet");
    std::fs::write(&bad, b"VNET\x07\x00\x00\x00junk").unwrap();
    let out = tmp.path().join("pred");
    let o = run(&[
        "predict",
        "--model",
        bad.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.code, 5, "{}", stderr(&o));
    assert!(!out.exists());

    std::fs::create_dir_all(&out).unwrap();
    let o = run(&[
        "evaluate",
        "--pred",
        out.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("r.csv").to_str().unwrap(),
        "--ids",
        "1-2",
    ]);
    assert_eq!(o.code, 6);
    assert!(stderr(&o).contains("01.pmap"));
    assert!(!tmp.path().join("r.csv").exists());
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck"]);
    assert!(o.success(), "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.ends_with(" ok")).count(), 7);
    let o = run(&["gradcheck", "--configs", "3", "--perturb", "affine"]);
    assert_eq!(o.code, 7);
    assert!(stderr(&o).contains("affine"));
}

#[test]
fn version() {
    let o = run(&["version"]);
    assert!(o.success());
    assert!(stdout(&o).starts_with("vesselnet "));
}
