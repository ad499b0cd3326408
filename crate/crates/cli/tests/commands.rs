use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setclust::data::{read_dataset, LabeledSet};
use setclust::eval::EvalReport;
use setclust_cli::ClusterResult;

const TINY: [&str; 9] = [
    "--model.k_max=3",
    "--model.layers=1",
    "--model.fc_units=8",
    "--model.count_units=4",
    "--train.batch_sets=4",
    "--train.set_size=8",
    "--train.validation_interval=0",
    "--train.seed=5",
    "--model.seed=5",
];

fn setclust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_setclust")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = setclust(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_with(extra: &[&str]) -> Vec<String> {
    TINY.iter().chain(extra).map(|a| a.to_string()).collect()
}

fn run_tiny(cmd: &[&str], extra: &[&str]) -> Output {
    let mut args: Vec<String> = cmd.iter().map(|a| a.to_string()).collect();
    args.extend(tiny_with(extra));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    setclust(&refs)
}

fn train_tiny(dir: &Path, steps: u64) -> PathBuf {
    let model = dir.join(format!("model{steps}.bin"));
    let out = run_tiny(&["train", "--out", s(&model)], &[&format!("--train.steps={steps}")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn generate_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for p in [&a, &b] {
        ok(&["generate", "--count", "10", "--out", s(p), "--seed", "3", "--train.set_size=12"]);
    }
    let sets = read_dataset(&a).unwrap();
    assert_eq!(sets.len(), 10);
    assert!(sets.iter().all(|set| (1..=5).contains(&set.k) && set.len() == 12));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn zero_step_training_writes_an_untrained_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 0);
    assert!(model.exists());
    let history = dir.path().join("model0.bin.history.json");
    let text = std::fs::read_to_string(history).unwrap();
    assert!(text.contains("\"steps\": []"), "{text}");
}

#[test]
fn corrupt_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "train.batch_sets = 0\n").unwrap();
    let out = setclust(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("m.bin"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.batch_sets"));

    std::fs::write(&cfg, "[model]\nlayerz = 3\n").unwrap();
    let out = setclust(&["generate", "--config", s(&cfg), "--count", "1", "--out", s(&dir.path().join("d.jsonl"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.layerz"));

    let out = setclust(&["generate", "--count", "1", "--out", "x", "--device", "gpu"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn resume_matches_a_straight_run() {
    let dir = tempfile::tempdir().unwrap();
    let straight = train_tiny(dir.path(), 4);
    let ckpt = dir.path().join("ckpt.bin");
    let first = dir.path().join("first.bin");
    let out = run_tiny(
        &["train", "--out", s(&first), "--checkpoint", s(&ckpt)],
        &["--train.steps=2"],
    );
    assert!(out.status.success());
    let resumed = dir.path().join("resumed.bin");
    let out = run_tiny(&["train", "--out", s(&resumed), "--resume", s(&ckpt)], &["--train.steps=4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read(&straight).unwrap(), std::fs::read(&resumed).unwrap());
}

#[test]
fn cluster_output_shape_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 2);
    let input = dir.path().join("points.json");
    let points: Vec<[f64; 2]> = (0..7).map(|i| [i as f64, (i * i) as f64 * 0.1]).collect();
    std::fs::write(&input, serde_json::to_string(&points).unwrap()).unwrap();
    let result_path = dir.path().join("result.json");
    ok(&["cluster", "--model", s(&model), "--input", s(&input), "--out", s(&result_path), "--probs"]);
    let result: ClusterResult = serde_json::from_str(&std::fs::read_to_string(&result_path).unwrap()).unwrap();
    assert_eq!(result.assignments.len(), 7);
    assert_eq!(result.points, points);
    assert_eq!(result.count_distribution.len(), 3);
    assert!((result.count_distribution.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    let max = result.count_distribution.iter().cloned().fold(f64::MIN, f64::max);
    let first_max = result.count_distribution.iter().position(|&p| p == max).unwrap();
    assert_eq!(result.best_k, first_max + 1);
    assert!(result.assignments.iter().all(|&l| l < result.best_k));
    let probs = result.assignment_probs.as_ref().unwrap();
    assert_eq!(probs.len(), 3);
    assert_eq!(probs[2][6].len(), 3);
    assert_eq!(result.per_k_partitions[result.best_k - 1].labels, result.assignments);

    let one = dir.path().join("one.json");
    std::fs::write(&one, "[[0.0, 1.0]]").unwrap();
    let out = setclust(&["cluster", "--model", s(&model), "--input", s(&one), "--out", s(&result_path)]);
    assert_eq!(code(&out), 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "[[0.0, 1.0, 2.0], [1.0, 2.0, 3.0]]").unwrap();
    let out = setclust(&["cluster", "--model", s(&model), "--input", s(&bad), "--out", s(&result_path)]);
    assert_eq!(code(&out), 2);

    let out = setclust(&[
        "cluster", "--model", s(&model), "--input", s(&input), "--out", s(&result_path), "--model.k_max=4",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("k_max"));

    let out = setclust(&["cluster", "--model", s(&dir.path().join("missing.bin")), "--input", s(&input), "--out", s(&result_path)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn eval_prints_summary_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_tiny(dir.path(), 1);
    let report = dir.path().join("report.json");
    let csv = dir.path().join("report.csv");
    let stdout = ok(&[
        "eval", "--model", s(&model), "--episodes", "6", "--report", s(&report), "--csv", s(&csv), "--train.set_size=8",
        "--data.families=[\"gaussian-blobs\"]",
    ]);
    for key in ["mr_mean", "nmi_mean", "count_accuracy"] {
        assert!(stdout.contains(key), "{stdout}");
    }
    let parsed: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.episodes, 6);
    assert!(parsed.per_episode.iter().all(|r| r.k_true <= 3 && r.k_pred <= 3));
    let lines = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(lines.lines().count(), 7);
    assert!(lines.starts_with("episode,family,k_true,k_pred,mr,nmi"));
}

/// Small deterministic generator for the Monte-Carlo oracle.
struct SplitMix(u64);

impl SplitMix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// MR by exhaustive relabeling over `k` labels.
fn brute_mr(pred: &[usize], truth: &[usize], k: usize) -> f64 {
    let best = permutations(k)
        .iter()
        .map(|perm| pred.iter().zip(truth).filter(|(&p, &t)| perm[p] == t).count())
        .max()
        .unwrap();
    1.0 - best as f64 / pred.len() as f64
}

#[test]
fn random_stub_matches_the_random_assignment_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = 300;
    let data = dir.path().join("episodes.jsonl");
    let common = ["--train.set_size=16", "--seed", "11"];
    let mut gen = vec!["generate", "--count", "300", "--out", s(&data)];
    gen.extend(common);
    ok(&gen);
    let report = dir.path().join("stub.json");
    let mut ev = vec!["eval", "--baseline", "random-stub", "--episodes", "300", "--report", s(&report)];
    ev.extend(common);
    ok(&ev);

    // The generated file holds exactly the evaluation episodes.
    let sets: Vec<LabeledSet> = read_dataset(&data).unwrap();
    assert_eq!(sets.len(), episodes);
    let mut rng = SplitMix(99);
    let draws = 40;
    let mut per_set = Vec::with_capacity(episodes);
    for set in &sets {
        let mut acc = 0.0;
        for _ in 0..draws {
            let pred: Vec<usize> = (0..set.len()).map(|_| (rng.next() % set.k as u64) as usize).collect();
            acc += brute_mr(&pred, &set.labels, set.k);
        }
        per_set.push(acc / draws as f64);
    }
    let expected = per_set.iter().sum::<f64>() / episodes as f64;

    let parsed: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let var = parsed.per_episode.iter().map(|r| (r.mr - expected).powi(2)).sum::<f64>() / episodes as f64;
    let se = (var / episodes as f64).sqrt();
    assert!(
        (parsed.mr_mean - expected).abs() <= 4.0 * se,
        "stub {} vs oracle {expected} (se {se})",
        parsed.mr_mean
    );
}

#[test]
fn plot_rendering_and_truth_outlines() {
    let dir = tempfile::tempdir().unwrap();
    let result = ClusterResult {
        k_max: 2,
        count_distribution: vec![0.1, 0.9],
        best_k: 2,
        assignments: vec![0, 0, 1, 1],
        per_k_partitions: vec![],
        assignment_probs: None,
        points: vec![[0.0, 0.0], [0.1, 0.0], [1.0, 1.0], [1.1, 1.0]],
    };
    let input = dir.path().join("result.json");
    std::fs::write(&input, serde_json::to_string(&result).unwrap()).unwrap();
    let a = dir.path().join("a.svg");
    let b = dir.path().join("b.svg");
    ok(&["plot", "--input", s(&input), "--out", s(&a)]);
    ok(&["plot", "--input", s(&input), "--out", s(&b)]);
    let svg = std::fs::read_to_string(&a).unwrap();
    assert_eq!(svg, std::fs::read_to_string(&b).unwrap());
    assert_eq!(svg.matches("<circle").count(), 4);
    let fills: std::collections::BTreeSet<&str> = svg.match_indices("fill=\"#").map(|(i, _)| &svg[i + 6..i + 13]).collect();
    // Background plus two cluster colours.
    assert_eq!(fills.len(), 3, "{fills:?}");

    let truth_set = LabeledSet {
        family: setclust::data::Family::GaussianBlobs,
        k: 2,
        points: result.points.clone(),
        labels: vec![1, 0, 0, 0],
        seed: 0,
    };
    let truth = dir.path().join("truth.jsonl");
    setclust::data::write_dataset(&truth, std::slice::from_ref(&truth_set)).unwrap();
    let c = dir.path().join("c.svg");
    ok(&["plot", "--input", s(&input), "--out", s(&c), "--truth", s(&truth)]);
    assert_eq!(std::fs::read_to_string(&c).unwrap().matches("stroke=").count(), 1);

    let disjoint = LabeledSet {
        points: vec![[5.0, 5.0], [6.0, 6.0], [7.0, 7.0], [8.0, 8.0]],
        ..truth_set
    };
    setclust::data::write_dataset(&truth, &[disjoint]).unwrap();
    let d = dir.path().join("d.svg");
    let out = setclust(&["plot", "--input", s(&input), "--out", s(&d), "--truth", s(&truth)]);
    assert_eq!(code(&out), 2);
    assert!(!d.exists());

    // Dataset records plot directly.
    let data = dir.path().join("data.jsonl");
    ok(&["generate", "--count", "2", "--out", s(&data), "--train.set_size=10"]);
    let e = dir.path().join("e.svg");
    ok(&["plot", "--input", s(&data), "--record", "1", "--out", s(&e), "--truth", s(&data)]);
    let svg = std::fs::read_to_string(&e).unwrap();
    assert_eq!(svg.matches("<circle").count(), 10);
    assert!(!svg.contains("stroke="));
}
