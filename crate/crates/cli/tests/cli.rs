use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn valid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_valid"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Corpus {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let o = valid(&["synth", "-o", s(&root.join("corpus")), "--questions", &n.to_string()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn traces(&self) -> PathBuf {
        self.path("corpus/traces")
    }
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&valid(&["--help"])), 0);
    assert_eq!(code(&valid(&["--version"])), 0);
    assert_eq!(code(&valid(&["decode", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let c = Corpus::new(2);
    let out = c.path("out");
    let traces = c.traces();
    let o = valid(&["decode", "--alpha", "-1", s(&traces), "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--alpha"), "{}", stderr(&o));
    assert!(!out.exists(), "nothing written on a usage error");

    for bad in [
        vec!["decode", "--beta", "1.5"],
        vec!["decode", "--k", "0"],
        vec!["decode", "--mode", "nonsense"],
        vec!["decode", "--bucket", "13,15"],
        vec!["decode", "--bucket", "llava-v1.5", "--standard-layer", "23"],
        vec!["decode", "--temperature", "0.7"],
        vec!["decode", "--sampler", "temperature", "--temperature", "0"],
        vec!["decode", "--vcd-alpha", "-0.5"],
        vec!["decode", "--jobs", "0"],
    ] {
        let mut args = bad.clone();
        args.extend([s(&traces), "-o", s(&out)]);
        let o = valid(&args);
        assert_eq!(code(&o), 1, "{bad:?}: {}", stderr(&o));
        assert!(!out.exists(), "{bad:?} wrote output");
    }
    assert_eq!(code(&valid(&["frobnicate"])), 1);
    assert_eq!(code(&valid(&["decode"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let c = Corpus::new(3);
    let broken = c.path("broken.vlt");
    let bytes = fs::read(c.traces().join("synth-00000.vlt")).unwrap();
    fs::write(&broken, &bytes[..bytes.len() - 3]).unwrap();
    let o = valid(&["decode", s(&broken), "-o", s(&c.path("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.vlt"), "{}", stderr(&o));
    assert!(stderr(&o).contains("truncated"), "{}", stderr(&o));

    let o = valid(&["inspect-trace", s(&c.path("missing.vlt"))]);
    assert_eq!(code(&o), 2);

    // traces carry standard layer 24; a bucket claiming 23 does not fit them
    let o = valid(&[
        "decode",
        "--bucket",
        "13,15",
        "--standard-layer",
        "23",
        s(&c.traces()),
        "-o",
        s(&c.path("out2")),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = valid(&["synth", "-o", s(&c.path("nn")), "--no-noise", "--questions", "2"]);
    assert_eq!(code(&o), 0);
    let o = valid(&["decode", "--mode", "vcd", s(&c.path("nn/traces")), "-o", s(&c.path("o3"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("noise"), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let c = Corpus::new(30);
    let q = c.path("corpus/questions.jsonl");
    let v = c.path("corpus/vocab.json");
    let dec = c.path("dec");
    let o = valid(&["decode", "--mode", "vanilla,valid,vcd", s(&c.traces()), "-o", s(&dec)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = fs::read_to_string(dec.join("outcomes.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 90);
    assert!(dec.join("config.json").exists());

    let sc = c.path("score");
    let o = valid(&["score", s(&dec.join("outcomes.jsonl")), "--questions", s(&q), "--vocab", s(&v), "-o", s(&sc)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("| all | valid |"));
    let csv = fs::read_to_string(sc.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("mode,split,policy,tp,fp,tn,fn"));

    let cmp = c.path("cmp");
    let o = valid(&["compare", s(&sc.join("metrics.csv")), "--baseline", "vanilla", "-o", s(&cmp)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(fs::read_to_string(cmp.join("deltas.csv")).unwrap().lines().count() > 1);
    let o = valid(&["compare", s(&sc.join("metrics.csv")), "--baseline", "dola", "-o", s(&c.path("cmp2"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dola"));

    let edr = c.path("edr");
    let o = valid(&["edr", s(&c.traces()), "--questions", s(&q), "--vocab", s(&v), "--buckets", "1-12/13,15,17,19,21,23,25", "-o", s(&edr)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["edr.csv", "edr.svg", "probes.jsonl", "config.json"] {
        assert!(edr.join(f).exists(), "{f}");
    }
    let curves = c.path("curves");
    let o = valid(&["curves", s(&c.traces()), "--questions", s(&q), "--vocab", s(&v), "-o", s(&curves)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(curves.join("curves.csv")).unwrap().lines().count(), 26);

    let o = valid(&["inspect-trace", s(&c.traces().join("synth-00003.vlt")), "--step", "0"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for needle in ["vocab_size:     64", "standard_layer: 24", "steps:          2", "noise reference", "(standard)"] {
        assert!(text.contains(needle), "{needle} missing from\n{text}");
    }
}

#[test]
fn bucket_file_and_explicit_lists() {
    let c = Corpus::new(4);
    let presets = c.path("presets.txt");
    fs::write(&presets, "# early layers\nearly = 1-6 ; 24\n").unwrap();
    let o = valid(&["decode", "--bucket-file", s(&presets), "--bucket", "early", s(&c.traces()), "-o", s(&c.path("a"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snap = fs::read_to_string(c.path("a/config.json")).unwrap();
    assert!(snap.contains("\"schema_version\": 1"));
    let o = valid(&["decode", "--bucket", "13-23", "--standard-layer", "24", "--k", "3", s(&c.traces()), "-o", s(&c.path("b"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let line = fs::read_to_string(c.path("b/outcomes.jsonl")).unwrap();
    assert_eq!(line.lines().next().unwrap().matches("\"weight\"").count(), 6, "3 layers x 2 steps");

    fs::write(&presets, "broken line\n").unwrap();
    let o = valid(&["decode", "--bucket-file", s(&presets), s(&c.traces()), "-o", s(&c.path("c"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn parallel_decode_matches_serial() {
    let c = Corpus::new(40);
    let args = |out: &str, jobs: &str| {
        valid(&["decode", "--mode", "valid,vcd_then_valid", "--sampler", "temperature", "--temperature", "0.8", "--seed", "5", "--jobs", jobs, s(&c.traces()), "-o", s(&c.path(out))])
    };
    assert_eq!(code(&args("one", "1")), 0);
    assert_eq!(code(&args("four", "4")), 0);
    assert_eq!(read_all(&c.path("one")), read_all(&c.path("four")));
}

#[test]
fn inputs_are_not_modified() {
    let c = Corpus::new(5);
    let before = read_all(&c.path("corpus"));
    let q = c.path("corpus/questions.jsonl");
    let v = c.path("corpus/vocab.json");
    valid(&["decode", s(&c.traces()), "-o", s(&c.path("d"))]);
    valid(&["curves", s(&c.traces()), "--questions", s(&q), "--vocab", s(&v), "-o", s(&c.path("cv"))]);
    valid(&["inspect-trace", s(&c.traces().join("synth-00000.vlt"))]);
    assert_eq!(read_all(&c.path("corpus")), before);
}
