mod pgm;
mod settings;

use std::path::Path;
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Command};
use mocae::config::KvConfig;
use mocae::data::{
    case_dirs, generate_phantom, read_case_dir, slice_volume, CaseScan, Dataset, PhantomConfig,
};
use mocae::eval::{evaluate_protocol, random_baseline, select_query_slices, DiceReport};
use mocae::model::{AnyCheckpoint, ModelConfig};
use mocae::retrieval::{build_index, query, Index, QueryOptions};
use mocae::selfcheck;
use mocae::tensor::DType;
use mocae::train::{gamma_grid_search, split_dataset, train_with_progress, TrainConfig};
use mocae::Scalar;

use settings::{check_writable, Settings};

/// Why a command stopped: bad invocation or configuration (exit 2), or a
/// failed operation (exit 1).
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Op(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn op(msg: impl Into<String>) -> Self {
        Failure::Op(msg.into())
    }
}

impl From<mocae::Error> for Failure {
    fn from(e: mocae::Error) -> Self {
        match e {
            mocae::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Op(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

const COMMANDS: [(&str, &str); 8] = [
    ("phantom-gen", "generate a synthetic phantom dataset archive"),
    ("prepare", "slice and normalize a directory of NIfTI cases into an archive"),
    ("train", "train a model on an archive"),
    ("grid-search", "retrain over a grid of loss weights and score each by retrieval"),
    ("index", "encode an archive into a descriptor index"),
    ("query", "retrieve the nearest slices for one query slice"),
    ("evaluate", "score retrieval with Dice over the largest-tumour slices"),
    ("gradcheck", "compare analytic gradients with finite differences"),
];

fn cli() -> Command {
    let mut cmd = Command::new("mocae")
        .about("Dual-objective autoencoder for brain MRI slice retrieval")
        .after_help("Settings come from --config FILE (key = value lines) and --key value overrides.")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(
            Command::new(name)
                .about(about)
                .arg(
                    Arg::new("config")
                        .long("config")
                        .short('c')
                        .value_name("FILE")
                        .help("configuration file"),
                )
                .arg(
                    Arg::new("overrides")
                        .value_name("--KEY VALUE")
                        .num_args(0..)
                        .allow_hyphen_values(true)
                        .trailing_var_arg(true),
                ),
        );
    }
    cmd
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Op(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(name: &str, m: &ArgMatches) -> Outcome {
    let rest: Vec<String> = m
        .get_many::<String>("overrides")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    let mut s = Settings::load(m.get_one::<String>("config").map(String::as_str), &rest)?;
    match name {
        "phantom-gen" => phantom_gen(&mut s),
        "prepare" => prepare(&mut s),
        "train" => train_cmd(&mut s),
        "grid-search" => grid_search(&mut s),
        "index" => index_cmd(&mut s),
        "query" => query_cmd(&mut s),
        "evaluate" => evaluate(&mut s),
        "gradcheck" => gradcheck(&mut s),
        _ => unreachable!("unknown subcommand {name}"),
    }
}

fn write_archive(data: &Dataset, path: &Path) -> Outcome {
    data.write(path).map_err(|e| Failure::op(e.to_string()))
}

fn read_archive(path: &Path) -> Result<Dataset, Failure> {
    Dataset::read(path).map_err(|e| Failure::op(format!("{}: {e}", path.display())))
}

fn summarize(data: &Dataset) {
    let cases = data.case_ids().len();
    let tumours = data.tumour_count();
    let fraction = if data.is_empty() {
        0.0
    } else {
        tumours as f64 / data.len() as f64
    };
    println!(
        "cases {cases} slices {} tumoural {tumours} tumour_fraction {fraction:.4}",
        data.len()
    );
}

fn phantom_gen(s: &mut Settings) -> Outcome {
    let phantom = PhantomConfig::from_kv(s.user())?;
    let mut kv = KvConfig::new();
    phantom.to_kv(&mut kv);
    s.absorb(&kv);
    let out = s.path("io.archive")?;
    let keep_empty = s.value("data.keep_empty", true)?;
    let digest = s.finish()?;
    check_writable(&out)?;
    let mut samples = Vec::new();
    for case in generate_phantom(&phantom)? {
        samples.extend(slice_volume(&case, keep_empty)?);
    }
    let data = Dataset::new(samples);
    write_archive(&data, &out)?;
    s.write_beside(&out, &digest)?;
    summarize(&data);
    Ok(())
}

fn prepare(s: &mut Settings) -> Outcome {
    let input = s.path("io.input_dir")?;
    let out = s.path("io.archive")?;
    let keep_empty = s.value("data.keep_empty", true)?;
    let digest = s.finish()?;
    check_writable(&out)?;
    let mut samples = Vec::new();
    let dirs = case_dirs(&input)?;
    if dirs.is_empty() {
        eprintln!("warning: no case directories under {}", input.display());
    }
    for dir in dirs {
        match read_case_dir(&dir)? {
            CaseScan::Loaded(case) => {
                if case.seg.is_none() {
                    eprintln!("warning: case {}: no seg volume, labelled healthy", case.id);
                }
                if case.anat.is_none() {
                    eprintln!("warning: case {}: no anat volume, excluded from normal Dice", case.id);
                }
                samples.extend(slice_volume(&case, keep_empty)?);
            }
            CaseScan::Missing { id, modalities } => {
                let names: Vec<&str> = modalities.iter().map(|m| m.name()).collect();
                eprintln!("warning: case {id} skipped, missing {}", names.join(", "));
            }
        }
    }
    let data = Dataset::new(samples);
    write_archive(&data, &out)?;
    s.write_beside(&out, &digest)?;
    summarize(&data);
    Ok(())
}

/// Model and training sections; the input size defaults to the archive's.
fn model_and_train(s: &mut Settings, data: &Dataset) -> Result<(ModelConfig, TrainConfig), Failure> {
    let mut kv = s.user().clone();
    if !kv.contains("model.input_size") {
        if let Some((h, w)) = data.image_size()? {
            kv.set("model.input_size", format!("{h}x{w}"));
        }
    }
    let mc = ModelConfig::from_kv(&kv)?;
    let tc = TrainConfig::from_kv(&kv)?;
    let mut out = KvConfig::new();
    mc.to_kv(&mut out);
    tc.to_kv(&mut out);
    s.absorb(&out);
    Ok((mc, tc))
}

/// Retrieval section with command-specific defaults for `k` and
/// self-exclusion.
fn query_options(s: &mut Settings, k: usize, exclude_self: bool) -> Result<QueryOptions, Failure> {
    let mut kv = s.user().clone();
    if !kv.contains("retrieval.k") {
        kv.set("retrieval.k", k);
    }
    if !kv.contains("retrieval.exclude_self") {
        kv.set("retrieval.exclude_self", exclude_self);
    }
    let opts = QueryOptions::from_kv(&kv)?;
    let mut out = KvConfig::new();
    opts.to_kv(&mut out);
    s.absorb(&out);
    Ok(opts)
}

fn train_cmd(s: &mut Settings) -> Outcome {
    let archive = s.path("io.archive")?;
    let out = s.path("io.checkpoint")?;
    let history = s.derived_path("io.history", &out, ".history.csv");
    let data = read_archive(&archive)?;
    let (mc, tc) = model_and_train(s, &data)?;
    let digest = s.finish()?;
    check_writable(&out)?;
    check_writable(&history)?;
    let split = split_dataset(&data.case_ids(), tc.split_fraction, tc.seed)?;
    let (train_set, held_out) = split.apply(&data);
    println!(
        "train {} slices, held out {} slices",
        train_set.len(),
        held_out.len()
    );
    let csv = match mc.precision {
        DType::F32 => fit::<f32>(&train_set, &held_out, &mc, &tc, &out)?,
        DType::F64 => fit::<f64>(&train_set, &held_out, &mc, &tc, &out)?,
    };
    std::fs::write(&history, csv).map_err(|e| Failure::op(format!("{}: {e}", history.display())))?;
    s.write_beside(&out, &digest)?;
    println!("checkpoint {}", out.display());
    Ok(())
}

fn fit<T: Scalar>(
    train_set: &Dataset,
    held_out: &Dataset,
    mc: &ModelConfig,
    tc: &TrainConfig,
    out: &Path,
) -> Result<String, Failure> {
    let ckpt = train_with_progress::<T>(train_set, held_out, mc, tc, |p| {
        let val = p
            .validation
            .map(|v| format!(" val L_t {:.6}", v.total))
            .unwrap_or_default();
        eprintln!(
            "epoch {} L_r {:.6} L_c {:.6} L_t {:.6}{val}",
            p.epoch, p.train.recon, p.train.class, p.train.total
        );
    })?;
    ckpt.save(out)?;
    Ok(ckpt.history.to_csv())
}

fn grid_search(s: &mut Settings) -> Outcome {
    let archive = s.path("io.archive")?;
    let out = s.path("io.grid")?;
    let step: f64 = s.value("grid.step", 0.1)?;
    let data = read_archive(&archive)?;
    let (mc, tc) = model_and_train(s, &data)?;
    let opts = query_options(s, 1, false)?;
    let digest = s.finish()?;
    check_writable(&out)?;
    let split = split_dataset(&data.case_ids(), tc.split_fraction, tc.seed)?;
    let (train_set, validation) = split.apply(&data);
    let show = |p: &mocae::train::GridPoint| {
        println!(
            "gamma1 {:.3} gamma2 {:.3} entire {:.4} tumoural {:.4} normal {:.4}",
            p.weights.recon(),
            p.weights.class(),
            p.report.entire.mean,
            p.report.tumoural.mean,
            p.report.normal.mean
        )
    };
    let report = match mc.precision {
        DType::F32 => gamma_grid_search::<f32>(&train_set, &validation, &mc, &tc, step, &opts, show)?,
        DType::F64 => gamma_grid_search::<f64>(&train_set, &validation, &mc, &tc, step, &opts, show)?,
    };
    std::fs::write(&out, report.to_csv()).map_err(|e| Failure::op(format!("{}: {e}", out.display())))?;
    s.write_beside(&out, &digest)?;
    let best = report.best_weights();
    println!("best gamma1 {} gamma2 {}", best.recon(), best.class());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint, Failure> {
    AnyCheckpoint::load(path).map_err(|e| Failure::op(format!("{}: {e}", path.display())))
}

fn load_index(path: &Path) -> Result<Index, Failure> {
    Index::load(path).map_err(|e| Failure::op(format!("{}: {e}", path.display())))
}

/// Records the checkpoint's model section in the resolved configuration.
fn note_model(s: &mut Settings, ckpt: &AnyCheckpoint) {
    let mut kv = KvConfig::new();
    let mut mc = ckpt.model_config().clone();
    mc.precision = ckpt.precision();
    mc.to_kv(&mut kv);
    let prefixed: KvConfig = {
        let mut p = KvConfig::new();
        for (k, v) in kv.iter() {
            p.set(format!("checkpoint.{k}"), v);
        }
        p
    };
    s.absorb(&prefixed);
}

fn index_cmd(s: &mut Settings) -> Outcome {
    let ck_path = s.path("io.checkpoint")?;
    let archive = s.path("io.archive")?;
    let out = s.path("io.index")?;
    let ckpt = load_checkpoint(&ck_path)?;
    note_model(s, &ckpt);
    let digest = s.finish()?;
    check_writable(&out)?;
    let data = read_archive(&archive)?;
    let index = match &ckpt {
        AnyCheckpoint::F32(c) => build_index(&c.model, &data)?,
        AnyCheckpoint::F64(c) => build_index(&c.model, &data)?,
    };
    index.save(&out)?;
    s.write_beside(&out, &digest)?;
    let tumoural = index.entries().iter().filter(|e| e.tumour_flag).count();
    println!("entries {} tumoural {tumoural} dim {}", index.len(), index.dim());
    Ok(())
}

fn query_cmd(s: &mut Settings) -> Outcome {
    let ck_path = s.path("io.checkpoint")?;
    let index_path = s.path("io.index")?;
    let archive = s.path("io.archive")?;
    let queries_path = s.derived_path("io.queries", &archive, "");
    let dump = s.optional_path("io.dump_dir");
    let case: String = s
        .user()
        .raw("query.case")
        .ok_or_else(|| Failure::usage("missing setting query.case"))?
        .to_string();
    s.resolved.set("query.case", &case);
    let z: usize = s
        .user()
        .get("query.z")?
        .ok_or_else(|| Failure::usage("missing setting query.z"))?;
    s.resolved.set("query.z", z);
    let opts = query_options(s, QueryOptions::default().k, true)?;
    let ckpt = load_checkpoint(&ck_path)?;
    note_model(s, &ckpt);
    s.finish()?;

    let index = load_index(&index_path)?;
    let database = read_archive(&archive)?;
    let queries = if queries_path == archive {
        database.clone()
    } else {
        read_archive(&queries_path)?
    };
    let slice = queries
        .samples
        .iter()
        .find(|q| q.case_id == case && q.z == z)
        .ok_or_else(|| Failure::op(format!("slice {case}:{z} is not in {}", queries_path.display())))?;
    let result = match &ckpt {
        AnyCheckpoint::F32(c) => query(&index, &c.model, slice, &opts)?,
        AnyCheckpoint::F64(c) => query(&index, &c.model, slice, &opts)?,
    };
    println!("query {case}:{z} probability {:.4}", result.probability);
    println!("rank,case,z,distance,gate_applied");
    for (rank, hit) in result.hits.iter().enumerate() {
        let e = &index.entries()[hit.entry];
        println!(
            "{},{},{},{},{}",
            rank + 1,
            e.case_id,
            e.z,
            hit.distance,
            result.gate_applied
        );
    }
    if result.hits.len() < opts.k {
        let why = if result.gate_applied {
            "the confidence gate left"
        } else {
            "the index holds"
        };
        eprintln!(
            "warning: {} of {} requested results; {why} too few candidates",
            result.hits.len(),
            opts.k
        );
    }
    if let Some(dir) = dump {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
        let io = |e: std::io::Error| Failure::op(format!("{}: {e}", dir.display()));
        pgm::write_slice(&dir, "query", slice).map_err(io)?;
        for (rank, hit) in result.hits.iter().enumerate() {
            let e = &index.entries()[hit.entry];
            let found = database
                .samples
                .iter()
                .find(|d| d.case_id == e.case_id && d.z == e.z)
                .ok_or_else(|| {
                    Failure::op(format!("retrieved slice {}:{} is not in the archive", e.case_id, e.z))
                })?;
            pgm::write_slice(&dir, &format!("rank{}_{}_z{}", rank + 1, e.case_id, e.z), found)
                .map_err(io)?;
        }
        println!("greymaps written to {}", dir.display());
    }
    Ok(())
}

fn print_report(label: &str, r: &DiceReport) {
    println!(
        "{label} normal {:.4}±{:.4} tumoural {:.4}±{:.4} entire {:.4}±{:.4} queries {}",
        r.normal.mean,
        r.normal.std,
        r.tumoural.mean,
        r.tumoural.std,
        r.entire.mean,
        r.entire.std,
        r.n_queries
    );
}

fn evaluate(s: &mut Settings) -> Outcome {
    let ck_path = s.path("io.checkpoint")?;
    let index_path = s.path("io.index")?;
    let archive = s.path("io.archive")?;
    let queries_path = s.derived_path("io.queries", &archive, "");
    let report_path = s.path("io.report")?;
    let csv_path = s.derived_path("io.report_csv", &report_path, ".csv");
    let trials: usize = s.value("eval.random_trials", 0)?;
    let baseline_seed: u64 = s.value("eval.seed", 0)?;
    let opts = query_options(s, 1, false)?;
    let ckpt = load_checkpoint(&ck_path)?;
    note_model(s, &ckpt);
    let digest = s.finish()?;
    check_writable(&report_path)?;
    check_writable(&csv_path)?;

    let index = load_index(&index_path)?;
    let database = read_archive(&archive)?;
    let all = if queries_path == archive {
        database.clone()
    } else {
        read_archive(&queries_path)?
    };
    let queries = all.subset(&select_query_slices(&all));
    if queries.is_empty() {
        return Err(Failure::op("no tumoural query slices"));
    }
    let report = match &ckpt {
        AnyCheckpoint::F32(c) => evaluate_protocol(&index, &database, &c.model, &queries, &opts, &digest)?,
        AnyCheckpoint::F64(c) => evaluate_protocol(&index, &database, &c.model, &queries, &opts, &digest)?,
    };
    let write = |p: &Path, text: String| {
        std::fs::write(p, text).map_err(|e| Failure::op(format!("{}: {e}", p.display())))
    };
    write(&report_path, report.to_json())?;
    write(&csv_path, report.to_csv())?;
    print_report("model", &report);
    if trials > 0 {
        let rb = random_baseline(&database, &queries, baseline_seed, trials, opts.exclude_self, &digest)?;
        print_report("random", &rb);
    }
    Ok(())
}

fn gradcheck(s: &mut Settings) -> Outcome {
    let points: usize = s.value("gradcheck.points", 10)?;
    let seed: u64 = s.value("gradcheck.seed", 7)?;
    s.finish()?;
    if points == 0 {
        return Err(Failure::usage("gradcheck.points must be positive"));
    }
    let results = selfcheck::run_all(points, seed)?;
    println!("check,points,coordinates,max_rel_error,status");
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{},{},{},{:.3e},{status}",
            r.name, r.points, r.coordinates, r.max_rel_error
        );
    }
    if failed > 0 {
        return Err(Failure::op(format!(
            "{failed} of {} checks exceeded {:e}",
            results.len(),
            selfcheck::TOLERANCE
        )));
    }
    println!("all {} checks within {:e}", results.len(), selfcheck::TOLERANCE);
    Ok(())
}
