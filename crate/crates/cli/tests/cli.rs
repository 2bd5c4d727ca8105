use std::path::Path;
use std::process::Command;

use mocae::data::{write_nifti, Dataset, Endian, Modality, NiftiDatatype, Volume};
use mocae::eval::DiceReport;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mocae(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_mocae"))
        .args(args)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = mocae(args);
    assert_eq!(r.code, 0, "{args:?}\nstdout:\n{}\nstderr:\n{}", r.stdout, r.stderr);
    r
}

fn digest(r: &Run) -> String {
    r.stdout
        .lines()
        .find_map(|l| l.strip_prefix("# config digest "))
        .expect("digest line")
        .to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--phantom.n_cases", "6", "--phantom.slices", "4", "--phantom.size", "32"];

fn tiny_model() -> Vec<&'static str> {
    vec![
        "--model.latent_dim", "8",
        "--model.stage_widths", "4,8",
        "--model.blocks_per_stage", "1",
        "--model.classifier_hidden", "4",
        "--train.epochs", "1",
        "--train.batch_size", "8",
        "--train.split_fraction", "0.34",
    ]
}

#[test]
fn phantom_gen_is_deterministic_and_summarised() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mocds");
    let b = dir.path().join("b.mocds");
    let ra = ok(&[&["phantom-gen", "--io.archive", s(&a)], &SMALL[..]].concat());
    let rb = ok(&[&["phantom-gen", "--io.archive", s(&b)], &SMALL[..]].concat());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(ra.stdout.contains("cases 6 slices 24 "), "{}", ra.stdout);
    assert_ne!(digest(&ra), digest(&rb), "paths are part of the configuration");
    assert!(dir.path().join("a.mocds.config").exists());

    let c = dir.path().join("c.mocds");
    let rc = ok(&[
        &["phantom-gen", "--io.archive", s(&c), "--phantom.tumour_probability", "0"],
        &SMALL[..],
    ]
    .concat());
    assert!(rc.stdout.contains(" tumoural 0 "), "{}", rc.stdout);
}

#[test]
fn digest_tracks_resolved_settings() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mocds");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("io.archive = {}\nphantom.n_cases = 6\nphantom.slices = 4\nphantom.size = 32\n", s(&out)),
    )
    .unwrap();
    let from_file = ok(&["phantom-gen", "--config", s(&cfg)]);
    let explicit = ok(&[&["phantom-gen", "--io.archive", s(&out)], &SMALL[..]].concat());
    assert_eq!(digest(&from_file), digest(&explicit));
    // Stating a default explicitly resolves to the same configuration.
    let with_default = ok(&["phantom-gen", "--config", s(&cfg), "--phantom.noise", "0.02"]);
    assert_eq!(digest(&from_file), digest(&with_default));
    let changed = ok(&["phantom-gen", "--config", s(&cfg), "--phantom.seed", "3"]);
    assert_ne!(digest(&from_file), digest(&changed));
    assert!(changed.stdout.contains("phantom.seed = 3"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mocds");
    assert_eq!(mocae(&[]).code, 2);
    assert_eq!(mocae(&["bogus"]).code, 2);
    assert_eq!(mocae(&["phantom-gen"]).code, 2, "missing io.archive");
    let typo = mocae(&["phantom-gen", "--io.archive", s(&out), "--phantom.n_case", "3"]);
    assert_eq!(typo.code, 2);
    assert!(typo.stderr.contains("phantom.n_case"), "{}", typo.stderr);
    assert_eq!(mocae(&["phantom-gen", "--io.archive", s(&out), "--phantom.size", "big"]).code, 2);
    assert_eq!(mocae(&["phantom-gen", "--io.archive", s(&out), "--phantom.size"]).code, 2);
    assert_eq!(mocae(&["phantom-gen", "--config", "/nonexistent/run.cfg"]).code, 2);
    let unwritable = mocae(&["phantom-gen", "--io.archive", "/nonexistent/dir/x.mocds"]);
    assert_eq!(unwritable.code, 2);
    assert!(unwritable.stderr.contains("/nonexistent/dir/x.mocds"));
    assert!(!out.exists());
}

#[test]
fn missing_inputs_are_operation_failures() {
    let dir = tempfile::tempdir().unwrap();
    let r = mocae(&[
        "index",
        "--io.checkpoint", "/nonexistent/m.mocae",
        "--io.archive", "/nonexistent/a.mocds",
        "--io.index", s(&dir.path().join("i.mocix")),
    ]);
    assert_eq!(r.code, 1, "{}", r.stderr);
}

fn volume(m: Modality, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
    let (w, h, d) = (8, 6, 3);
    let mut data = Vec::with_capacity(w * h * d);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y, z));
            }
        }
    }
    Volume::new([w, h, d], data, m).unwrap()
}

fn put(dir: &Path, name: &str, v: &Volume, dt: NiftiDatatype) {
    std::fs::write(dir.join(name), write_nifti(v, dt, Endian::Little).unwrap()).unwrap();
}

#[test]
fn prepare_reads_case_directories() {
    let root = tempfile::tempdir().unwrap();
    let input = root.path().join("in");
    std::fs::create_dir(&input).unwrap();
    let archive = root.path().join("out.mocds");

    let empty = ok(&["prepare", "--io.input_dir", s(&input), "--io.archive", s(&archive)]);
    assert!(empty.stderr.contains("warning"), "{}", empty.stderr);
    assert!(Dataset::read(&archive).unwrap().is_empty());

    let full = input.join("case_a");
    std::fs::create_dir(&full).unwrap();
    for (i, m) in Modality::IMAGING.into_iter().enumerate() {
        let v = volume(m, |x, y, z| (x + 2 * y + 3 * z + i) as f32);
        put(&full, &format!("case_a_{}.nii", m.name()), &v, NiftiDatatype::Int16);
    }
    let seg = volume(Modality::Seg, |x, _, z| if x < 2 && z == 1 { 4.0 } else { 0.0 });
    put(&full, "case_a_seg.nii", &seg, NiftiDatatype::Uint8);

    let partial = input.join("case_b");
    std::fs::create_dir(&partial).unwrap();
    put(&partial, "case_b_t1.nii", &volume(Modality::T1, |x, _, _| x as f32), NiftiDatatype::Float32);

    let r = ok(&["prepare", "--io.input_dir", s(&input), "--io.archive", s(&archive)]);
    assert!(r.stderr.contains("case_b skipped"), "{}", r.stderr);
    assert!(r.stderr.contains("case_a: no anat"), "{}", r.stderr);
    let data = Dataset::read(&archive).unwrap();
    assert_eq!(data.len(), 3);
    let flags: Vec<bool> = data.samples.iter().map(|s| s.tumour_present).collect();
    assert_eq!(flags, vec![false, true, false]);
    assert!(data.samples.iter().all(|s| s.case_id == "case_a" && !s.has_anatomy));

    std::fs::write(full.join("case_a_anat.nii"), b"not a nifti file").unwrap();
    let bad = mocae(&["prepare", "--io.input_dir", s(&input), "--io.archive", s(&archive)]);
    assert_eq!(bad.code, 1);
    assert!(bad.stderr.contains("case_a_anat.nii"), "{}", bad.stderr);
}

#[test]
fn pipeline_train_index_query_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("ph.mocds");
    let ckpt = dir.path().join("m.mocae");
    let index = dir.path().join("ix.mocix");
    let dumps = dir.path().join("dumps");
    let report = dir.path().join("report.json");

    ok(&[&["phantom-gen", "--io.archive", s(&archive), "--phantom.tumour_probability", "1"], &SMALL[..]].concat());
    let archive_bytes = std::fs::read(&archive).unwrap();

    let mut args = vec!["train", "--io.archive", s(&archive), "--io.checkpoint", s(&ckpt)];
    args.extend(tiny_model());
    let r = ok(&args);
    assert!(r.stdout.contains("model.input_size = 32x32"), "{}", r.stdout);
    let history = std::fs::read_to_string(dir.path().join("m.mocae.history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,L_r,L_c,L_t\n0,train,"));
    assert_eq!(history.lines().count(), 4);

    let r = ok(&["index", "--io.checkpoint", s(&ckpt), "--io.archive", s(&archive), "--io.index", s(&index)]);
    assert!(r.stdout.contains("entries 24 "), "{}", r.stdout);

    let data = Dataset::read(&archive).unwrap();
    let q = data.samples.iter().find(|s| s.tumour_present).unwrap();
    let z = q.z.to_string();
    let query = ok(&[
        "query",
        "--io.checkpoint", s(&ckpt),
        "--io.index", s(&index),
        "--io.archive", s(&archive),
        "--io.dump_dir", s(&dumps),
        "--query.case", &q.case_id,
        "--query.z", &z,
        "--retrieval.gate", "false",
        "--retrieval.exclude_self", "false",
    ]);
    let rows: Vec<&str> = query
        .stdout
        .lines()
        .skip_while(|l| !l.starts_with("rank,"))
        .skip(1)
        .take_while(|l| l.starts_with(char::is_numeric))
        .collect();
    assert_eq!(rows.len(), 5, "{}", query.stdout);
    assert!(rows[0].starts_with(&format!("1,{},{z},0,", q.case_id)), "{}", rows[0]);
    let pgm = std::fs::read(dumps.join("query_flair.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert_eq!(pgm.len(), 13 + 32 * 32);
    let files = std::fs::read_dir(&dumps).unwrap().count();
    assert_eq!(files, 4 * 6);

    let own = ok(&[
        "query",
        "--io.checkpoint", s(&ckpt),
        "--io.index", s(&index),
        "--io.archive", s(&archive),
        "--query.case", &q.case_id,
        "--query.z", &z,
    ]);
    assert!(own.stdout.contains("retrieval.exclude_self = true"));
    assert!(!own.stdout.contains(&format!("\n1,{},{z},", q.case_id)), "{}", own.stdout);

    let r = ok(&[
        "evaluate",
        "--io.checkpoint", s(&ckpt),
        "--io.index", s(&index),
        "--io.archive", s(&archive),
        "--io.report", s(&report),
    ]);
    assert!(r.stdout.contains("retrieval.k = 1"));
    let parsed = DiceReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed.n_queries, 6);
    for stat in [parsed.normal, parsed.tumoural, parsed.entire] {
        assert_eq!((stat.mean, stat.std), (1.0, 0.0));
    }
    assert_eq!(parsed.config_digest, digest(&r));
    let csv = std::fs::read_to_string(dir.path().join("report.json.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    assert_eq!(std::fs::read(&archive).unwrap(), archive_bytes, "inputs are read-only");
}

#[test]
fn gated_query_reports_shortfall() {
    let dir = tempfile::tempdir().unwrap();
    let archive = dir.path().join("ph.mocds");
    let ckpt = dir.path().join("m.mocae");
    let index = dir.path().join("ix.mocix");
    ok(&[&["phantom-gen", "--io.archive", s(&archive)], &SMALL[..]].concat());
    let mut args = vec!["train", "--io.archive", s(&archive), "--io.checkpoint", s(&ckpt)];
    args.extend(tiny_model());
    ok(&args);
    ok(&["index", "--io.checkpoint", s(&ckpt), "--io.archive", s(&archive), "--io.index", s(&index)]);
    let data = Dataset::read(&archive).unwrap();
    let q = &data.samples[0];
    let z = q.z.to_string();
    // A threshold of zero always gates, so only tumour-flagged entries remain.
    let r = ok(&[
        "query",
        "--io.checkpoint", s(&ckpt),
        "--io.index", s(&index),
        "--io.archive", s(&archive),
        "--query.case", &q.case_id,
        "--query.z", &z,
        "--retrieval.gate_threshold", "0",
        "--retrieval.k", "30",
    ]);
    let rows = r.stdout.lines().filter(|l| l.ends_with(",true")).count();
    assert_eq!(rows, data.tumour_count() - usize::from(q.tumour_present));
    assert!(r.stderr.contains("warning"), "{}", r.stderr);
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let r = ok(&["gradcheck"]);
    assert!(r.stdout.contains("all "), "{}", r.stdout);
    assert!(!r.stdout.contains("FAIL"));
}
