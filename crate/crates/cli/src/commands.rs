//! The six verbs. Each returns the path of the manifest it wrote.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use relufair::audit::AuditReport;
use relufair::model::{Checkpoint, GatedNetwork};
use relufair::theory::{best_pwl_error, count_linear_regions, rate_check, region_upper_bound, ConvexFn1D, ScalarReluNet};
use relufair::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::manifest::{self, finalize};
use crate::pipeline::{self, checkpoint_stem, fair_name, linearized_names, load_checkpoint, SeedData, SeedDir};
use crate::svg;

/// Domain on which random scalar networks have their regions counted.
pub const REGION_DOMAIN: (f64, f64) = (-5.0, 5.0);

/// Resolved settings shared by every verb.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub no_finetune: bool,
}

impl RunOptions {
    pub fn new(config: ExperimentConfig) -> Self {
        let out = config.output_dir.clone();
        Self {
            config,
            out,
            jobs: 1,
            no_finetune: false,
        }
    }

    fn seeds(&self) -> &[u64] {
        &self.config.seeds
    }

    fn manifest(&self, verb: &str, seeds: Vec<u64>, written: &[PathBuf], started: u64) -> anyhow::Result<PathBuf> {
        Ok(finalize(&self.out, verb, self.config.hash(), seeds, written, started)?)
    }
}

/// Run `f` for every seed on a pool of `jobs` threads, results in seed order.
fn per_seed<T: Send>(opts: &RunOptions, seeds: &[u64], f: impl Fn(u64) -> anyhow::Result<T> + Sync) -> anyhow::Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .context("building the worker pool")?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

fn require_files(paths: &[PathBuf]) -> anyhow::Result<()> {
    for p in paths {
        if !p.is_file() {
            return Err(Error::Io {
                path: p.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
            }
            .into());
        }
    }
    Ok(())
}

fn seed_dir(opts: &RunOptions, seed: u64) -> PathBuf {
    SeedDir::path(&opts.out, seed)
}

pub fn cmd_train(opts: &RunOptions) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let cfg = &opts.config;
    let written = per_seed(opts, opts.seeds(), |seed| {
        let data = pipeline::seed_data(cfg, seed)?;
        let out = pipeline::train_stage(cfg, seed, &data)?;
        let mut dir = SeedDir::new(&opts.out, seed)?;
        dir.save_trained("base", &out.base)?;
        if let Some(s) = &out.scratch {
            dir.save_trained("scratch", s)?;
        }
        Ok(dir.into_written())
    })?;
    opts.manifest("train", opts.seeds().to_vec(), &written.concat(), started)
}

/// With `checkpoint`, linearize that model only, under the seed stored in it.
pub fn cmd_linearize(opts: &RunOptions, checkpoint: Option<&Path>) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let cfg = &opts.config;
    let jobs: Vec<(u64, PathBuf)> = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            vec![(ck.metadata.seed, p.to_path_buf())]
        }
        None => opts.seeds().iter().map(|&s| (s, seed_dir(opts, s).join("base.ckpt.json"))).collect(),
    };
    require_files(&jobs.iter().map(|j| j.1.clone()).collect::<Vec<_>>())?;
    let seeds: Vec<u64> = jobs.iter().map(|j| j.0).collect();
    let written = per_seed(opts, &seeds, |seed| {
        let path = &jobs.iter().find(|j| j.0 == seed).expect("seed listed").1;
        let base = Checkpoint::load(path)?.network()?;
        let data = pipeline::seed_data(cfg, seed)?;
        let lins = pipeline::linearize_stage(cfg, seed, &base, &data, !opts.no_finetune)?;
        let mut dir = SeedDir::new(&opts.out, seed)?;
        for l in &lins {
            dir.save_linearized(l)?;
        }
        Ok(dir.into_written())
    })?;
    opts.manifest("linearize", seeds, &written.concat(), started)
}

/// With `checkpoint`, mitigate that student against `teacher` (default: the
/// `base.ckpt.json` next to it). Otherwise mitigate every configured
/// linearized model of every seed, starting from its un-tuned checkpoint.
pub fn cmd_mitigate(opts: &RunOptions, checkpoint: Option<&Path>, teacher: Option<&Path>) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let cfg = &opts.config;
    if !cfg.mitigation.enabled {
        return Err(ConfigError {
            field: "mitigation.enabled".into(),
            message: "mitigation is disabled in this config".into(),
        }
        .into());
    }
    // (seed, teacher, student, output stem)
    let mut jobs: Vec<(u64, PathBuf, PathBuf, String)> = Vec::new();
    match checkpoint {
        Some(p) => {
            let t = match teacher {
                Some(t) => t.to_path_buf(),
                None => p.parent().unwrap_or(Path::new(".")).join("base.ckpt.json"),
            };
            require_files(&[p.to_path_buf(), t.clone()])?;
            let stem = checkpoint_stem(p);
            let stem = stem.strip_suffix(".raw").unwrap_or(&stem).to_string();
            jobs.push((load_checkpoint(p)?.metadata.seed, t, p.to_path_buf(), fair_name(&stem)));
        }
        None => {
            for &s in opts.seeds() {
                let dir = seed_dir(opts, s);
                for name in linearized_names(cfg) {
                    jobs.push((s, dir.join("base.ckpt.json"), dir.join(format!("{name}.raw.ckpt.json")), fair_name(&name)));
                }
            }
        }
    }
    let paths: Vec<PathBuf> = jobs.iter().flat_map(|j| [j.1.clone(), j.2.clone()]).collect();
    require_files(&paths)?;
    let mut seeds: Vec<u64> = jobs.iter().map(|j| j.0).collect();
    seeds.dedup();
    let written = per_seed(opts, &seeds, |seed| {
        let data = pipeline::seed_data(cfg, seed)?;
        let mut dir = SeedDir::new(&opts.out, seed)?;
        for (_, t, s, stem) in jobs.iter().filter(|j| j.0 == seed) {
            let teacher = Checkpoint::load(t)?.network()?;
            let student = Checkpoint::load(s)?;
            let budget = student.metadata.budget;
            let student = student.network()?;
            let (net, outcome) = pipeline::mitigate_stage(cfg, seed, &teacher, &student, &data)?;
            let budget = budget.unwrap_or(net.relu_count()? as f64 / net.total_units() as f64);
            dir.save_mitigated(stem, &net, budget, &outcome)?;
        }
        Ok(dir.into_written())
    })?;
    opts.manifest("mitigate", seeds, &written.concat(), started)
}

/// Candidates found in a seed directory: the scratch model and every
/// configured linearized model are required, mitigated ones are used when
/// present.
fn default_candidates(opts: &RunOptions, seed: u64) -> Vec<PathBuf> {
    let dir = seed_dir(opts, seed);
    let mut out = Vec::new();
    if opts.config.scratch.is_some() {
        out.push(dir.join("scratch.ckpt.json"));
    }
    for name in linearized_names(&opts.config) {
        out.push(dir.join(format!("{name}.ckpt.json")));
    }
    for name in linearized_names(&opts.config) {
        let p = dir.join(format!("{}.ckpt.json", fair_name(&name)));
        if p.is_file() {
            out.push(p);
        }
    }
    out
}

fn audit_seed(opts: &RunOptions, seed: u64, base: &GatedNetwork, candidates: &[(String, GatedNetwork)], data: &SeedData) -> anyhow::Result<(Vec<PathBuf>, AuditReport)> {
    let report = pipeline::audit_stage(&opts.config, base, candidates, data)?;
    let mut dir = SeedDir::new(&opts.out, seed)?;
    dir.save_audit(&report)?;
    Ok((dir.into_written(), report))
}

/// With `base`, audit it against `candidates` under the seed stored in the
/// base checkpoint; otherwise audit each seed directory.
pub fn cmd_audit(opts: &RunOptions, base: Option<&Path>, candidates: &[PathBuf]) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let jobs: Vec<(u64, PathBuf, Vec<PathBuf>)> = match base {
        Some(b) => {
            let mut all = vec![b.to_path_buf()];
            all.extend(candidates.iter().cloned());
            require_files(&all)?;
            vec![(load_checkpoint(b)?.metadata.seed, b.to_path_buf(), candidates.to_vec())]
        }
        None => opts
            .seeds()
            .iter()
            .map(|&s| (s, seed_dir(opts, s).join("base.ckpt.json"), default_candidates(opts, s)))
            .collect(),
    };
    for (_, b, c) in &jobs {
        require_files(&[b.clone()])?;
        require_files(c)?;
    }
    let seeds: Vec<u64> = jobs.iter().map(|j| j.0).collect();
    let written = per_seed(opts, &seeds, |seed| {
        let (_, b, c) = jobs.iter().find(|j| j.0 == seed).expect("seed listed");
        let base = Checkpoint::load(b)?.network()?;
        let cands = c
            .iter()
            .map(|p| Ok((checkpoint_stem(p), Checkpoint::load(p)?.network()?)))
            .collect::<relufair::Result<Vec<_>>>()?;
        let data = pipeline::seed_data(&opts.config, seed)?;
        Ok(audit_seed(opts, seed, &base, &cands, &data)?.0)
    })?;
    opts.manifest("audit", seeds, &written.concat(), started)
}

fn write(path: PathBuf, bytes: &[u8], written: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    relufair::model::write_atomic(&path, bytes)?;
    written.push(path);
    Ok(())
}

/// Approximation-rate tables and plots plus region counts, under
/// `<out>/theory/`. Returns the files written.
pub fn run_theory(opts: &RunOptions, functions: &[String], ns: &[usize]) -> anyhow::Result<Vec<PathBuf>> {
    let dir = opts.out.join("theory");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let mut written = Vec::new();
    let mut rates = String::from("function,a,b,slope\n");
    let mut all_series = Vec::new();
    for name in functions {
        let f = ConvexFn1D::by_name(name).ok_or_else(|| ConfigError {
            field: "theory.functions".into(),
            message: format!("unknown function `{name}`"),
        })?;
        let mut csv = String::from("n,error\n");
        let mut pts = Vec::new();
        for &n in ns {
            let fit = best_pwl_error(&f, n, 1000 * n)?;
            csv.push_str(&format!("{n},{:?}\n", fit.error));
            pts.push((n, fit.error));
        }
        write(dir.join(format!("rate-{name}.csv")), csv.as_bytes(), &mut written)?;
        let series = vec![(name.clone(), pts)];
        write(dir.join(format!("rate-{name}.svg")), svg::rate_plot(&format!("Best {name} approximation error"), &series).as_bytes(), &mut written)?;
        all_series.extend(series);
        // the slope needs a geometric sequence of at least four counts
        let slope = rate_check(&f, ns).map(|r| format!("{:?}", r.slope)).unwrap_or_default();
        rates.push_str(&format!("{name},{:?},{:?},{slope}\n", f.a, f.b));
    }
    write(dir.join("rates.csv"), rates.as_bytes(), &mut written)?;
    if !all_series.is_empty() {
        write(dir.join("rates.svg"), svg::rate_plot("Best approximation error", &all_series).as_bytes(), &mut written)?;
    }

    let mut regions = String::from("network,widths,rectified_units,regions,bound\n");
    let mut row = |name: &str, net: &ScalarReluNet| -> anyhow::Result<()> {
        let widths: Vec<String> = net.widths().iter().map(usize::to_string).collect();
        let rectified: usize = net.layers().iter().map(|l| l.rectified.iter().filter(|&&r| r).count()).sum();
        let count = count_linear_regions(net, REGION_DOMAIN.0, REGION_DOMAIN.1)?;
        regions.push_str(&format!("{name},{},{rectified},{count},{}\n", widths.join("x"), region_upper_bound(&net.widths())?));
        Ok(())
    };
    let mut hinge = ScalarReluNet::two_unit_hinge();
    row("hinge", &hinge)?;
    hinge.set_rectified(0, 1, false)?;
    row("hinge-one-linear", &hinge)?;
    hinge.linearize_all();
    row("hinge-all-linear", &hinge)?;
    let t = &opts.config.theory;
    for widths in &t.region_widths {
        let tag: Vec<String> = widths.iter().map(usize::to_string).collect();
        for i in 0..t.region_nets {
            let net = ScalarReluNet::random(widths, i as u64)?;
            row(&format!("random-{}-{i}", tag.join("x")), &net)?;
        }
    }
    write(dir.join("regions.csv"), regions.as_bytes(), &mut written)?;
    Ok(written)
}

pub fn cmd_theory(opts: &RunOptions, functions: Option<&[String]>, ns: Option<&[usize]>) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let t = &opts.config.theory;
    let functions = functions.unwrap_or(&t.functions);
    let ns = ns.unwrap_or(&t.ns);
    if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ConfigError {
            field: "theory.ns".into(),
            message: "need increasing segment counts, all ≥ 1".into(),
        }
        .into());
    }
    let written = run_theory(opts, functions, ns)?;
    opts.manifest("theory", Vec::new(), &written, started)
}

/// Everything one seed contributes to `report`.
pub struct SeedRun {
    pub seed: u64,
    pub written: Vec<PathBuf>,
    pub report: AuditReport,
}

/// Train, linearize, mitigate and audit one seed.
pub fn run_seed(opts: &RunOptions, seed: u64) -> anyhow::Result<SeedRun> {
    let cfg = &opts.config;
    let data = pipeline::seed_data(cfg, seed)?;
    let trained = pipeline::train_stage(cfg, seed, &data)?;
    let mut dir = SeedDir::new(&opts.out, seed)?;
    dir.save_trained("base", &trained.base)?;
    let base = &trained.base.net;
    let mut candidates = Vec::new();
    if let Some(s) = &trained.scratch {
        dir.save_trained("scratch", s)?;
        candidates.push(("scratch".to_string(), s.net.clone()));
    }
    let lins = pipeline::linearize_stage(cfg, seed, base, &data, !opts.no_finetune)?;
    for l in &lins {
        dir.save_linearized(l)?;
        candidates.push((l.name.clone(), l.tuned.clone()));
    }
    if cfg.mitigation.enabled {
        for l in &lins {
            let (net, outcome) = pipeline::mitigate_stage(cfg, seed, base, &l.raw, &data)?;
            let stem = fair_name(&l.name);
            dir.save_mitigated(&stem, &net, l.budget, &outcome)?;
            candidates.push((stem, net));
        }
    }
    let (audit_files, report) = audit_seed(opts, seed, base, &candidates, &data)?;
    let mut written = dir.into_written();
    written.extend(audit_files);
    Ok(SeedRun { seed, written, report })
}

/// Mean accuracy and relative drop per model and group across seeds.
pub fn summary_csv(runs: &[SeedRun]) -> String {
    let mut out = String::from("model,group,seeds,mean_accuracy,mean_relative_drop\n");
    let Some(first) = runs.first() else { return out };
    for (k, m) in first.report.models().enumerate() {
        for (a, g) in first.report.group_names.iter().enumerate() {
            let accs: Vec<f64> = runs.iter().filter_map(|r| r.report.models().nth(k)).map(|m| m.groups[a].accuracy).collect();
            let drops: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.report.models().nth(k).and_then(|m| m.relative_drops[a]))
                .collect();
            let mean = |v: &[f64]| if v.is_empty() { String::new() } else { format!("{:?}", v.iter().sum::<f64>() / v.len() as f64) };
            out.push_str(&format!("{},{g},{},{},{}\n", m.name, accs.len(), mean(&accs), mean(&drops)));
        }
    }
    out
}

/// The whole pipeline for every seed, then the theory outputs and a
/// cross-seed summary.
pub fn cmd_report(opts: &RunOptions) -> anyhow::Result<PathBuf> {
    let started = manifest::now();
    let runs = per_seed(opts, opts.seeds(), |seed| run_seed(opts, seed))?;
    let mut written: Vec<PathBuf> = runs.iter().flat_map(|r| r.written.iter().cloned()).collect();
    let t = &opts.config.theory;
    written.extend(run_theory(opts, &t.functions, &t.ns)?);
    let summary = opts.out.join("summary.csv");
    write(summary, summary_csv(&runs).as_bytes(), &mut written)?;
    opts.manifest("report", opts.seeds().to_vec(), &written, started)
}
