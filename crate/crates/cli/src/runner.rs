//! Experiment execution: independent (method, class, repeat) jobs over a
//! worker pool. Each job derives its RNG streams from the base seed and its
//! own coordinates, so results do not depend on scheduling order. The split
//! seed is method-independent: every method sees the same splits, keeping
//! the significance tests paired on data.

use crate::config::{config_hash, Protocol, Resolved};
use crate::report::{
    with_context, BsvDatasetReport, BsvReport, BsvRunRecord, DatasetReport, MethodSummary, Report,
    RunRecord, SweepPoint, SweepReport, ViewSummary, SCORE_CONVENTION,
};
use mvocc_core::data::{
    load_dataset, normalize_apply, normalize_fit, one_vs_all_split, qualified_classes,
    synth_generate, MultiViewDataset,
};
use mvocc_core::eval::{self, late_fuse, MetricSummary, MetricsReport};
use mvocc_core::methods::{score, train_with_log, MethodConfig, MethodId};
use mvocc_core::rng::hash_seed;
use mvocc_core::{Error, Result, Rng, Tensor};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

pub struct Prepared {
    pub name: String,
    pub ds: MultiViewDataset,
    pub classes: Vec<i64>,
}

pub fn prepare(r: &Resolved) -> Result<Vec<Prepared>> {
    let mut out: Vec<Prepared> = Vec::with_capacity(r.datasets.len());
    for (i, entry) in r.datasets.iter().enumerate() {
        let ds = match (&entry.path, &entry.synth) {
            (Some(p), None) => load_dataset(p)?,
            (None, Some(s)) => synth_generate(s)?,
            _ => unreachable!("config resolution enforces one source"),
        };
        let mut name = entry.name.clone().unwrap_or_else(|| ds.name.clone());
        if name.is_empty() {
            name = format!("dataset{i}");
        }
        if out.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!(
                "duplicate dataset name '{name}'; set distinct names"
            )));
        }
        let classes = match r.protocol {
            Protocol::Direct => vec![1],
            Protocol::OneVsAll => match &r.classes {
                Some(cs) => {
                    let present = ds.classes();
                    for c in cs {
                        if !present.contains(c) {
                            return Err(Error::Data(format!(
                                "class {c} absent from dataset '{name}'"
                            )));
                        }
                    }
                    cs.clone()
                }
                None => {
                    let q = qualified_classes(&ds, r.ratio, r.min_train, r.max_classes);
                    if q.is_empty() {
                        return Err(Error::Data(format!(
                            "dataset '{name}': no class has more than {} training rows; \
                             lower min_train or set classes explicitly",
                            r.min_train
                        )));
                    }
                    q
                }
            },
        };
        out.push(Prepared { name, ds, classes });
    }
    Ok(out)
}

/// Run `f(0..n)` on a pool of `workers` threads; results keep job order and
/// the first error (by job index) wins, independent of scheduling.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let workers = workers.max(1).min(n.max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("job ran"))
        .collect()
}

struct JobSpec {
    ds: usize,
    method: MethodId,
    class: i64,
    repeat: usize,
}

fn split_seed(base: u64, dataset: &str, class: i64, repeat: usize) -> u64 {
    hash_seed(&[
        b"split",
        &base.to_le_bytes(),
        dataset.as_bytes(),
        &class.to_le_bytes(),
        &(repeat as u64).to_le_bytes(),
    ])
}

fn train_seed(base: u64, dataset: &str, method: &str, class: i64, repeat: usize) -> u64 {
    hash_seed(&[
        b"train",
        &base.to_le_bytes(),
        dataset.as_bytes(),
        method.as_bytes(),
        &class.to_le_bytes(),
        &(repeat as u64).to_le_bytes(),
    ])
}

struct PreparedSplit {
    train: Vec<Tensor>,
    test: Vec<Tensor>,
    labels: Vec<i8>,
}

fn make_split(
    r: &Resolved,
    p: &Prepared,
    class: i64,
    repeat: usize,
) -> Result<(u64, PreparedSplit)> {
    let seed = split_seed(r.seed, &p.name, class, repeat);
    let mut rng = Rng::new(seed);
    let split = one_vs_all_split(&p.ds, class, r.ratio, &mut rng)?;
    let stats = normalize_fit(&split.train_views)?;
    let train = normalize_apply(&stats, &split.train_views)?;
    let test = normalize_apply(&stats, &split.test_views)?;
    Ok((
        seed,
        PreparedSplit {
            train,
            test,
            labels: split.test_labels,
        },
    ))
}

fn run_one(r: &Resolved, p: &Prepared, s: &JobSpec) -> Result<RunRecord> {
    let t0 = Instant::now();
    let (split_seed, data) = make_split(r, p, s.class, s.repeat)?;
    let train_seed = train_seed(r.seed, &p.name, s.method.name(), s.class, s.repeat);
    let mut mc = MethodConfig::new(s.method, p.ds.view_dims());
    r.overrides.apply(&mut mc)?;
    mc.seed = train_seed;
    let (model, log) = train_with_log(&mc, &data.train)?;
    let scores = score(&model, &data.test)?;
    let fused = late_fuse(r.late_fusion, &scores)?;
    Ok(RunRecord {
        dataset: p.name.clone(),
        method: s.method.name().into(),
        class: s.class,
        repeat: s.repeat,
        split_seed,
        train_seed,
        auroc: eval::auroc(&fused, &data.labels)?,
        aupr: eval::aupr(&fused, &data.labels)?,
        tnr_at_95tpr: eval::tnr_at_tpr(&fused, &data.labels, 0.95)?,
        wall_ms: t0.elapsed().as_millis() as u64,
        warnings: log.warnings,
    })
}

/// Pool per-run metric values per method (class x repeat, in job order),
/// pick the best AUROC mean, and attach Welch p-values against it.
struct Pooled {
    method: MethodId,
    auroc: Vec<f64>,
    aupr: Vec<f64>,
    tnr: Vec<f64>,
}

fn aggregate(r: &Resolved, prepared: &[Prepared], records: &[RunRecord]) -> Vec<DatasetReport> {
    let mut out = Vec::with_capacity(prepared.len());
    for p in prepared {
        let mut pooled: Vec<Pooled> = Vec::new();
        for &m in &r.methods {
            let mut auroc = Vec::new();
            let mut aupr = Vec::new();
            let mut tnr = Vec::new();
            for rec in records {
                if rec.dataset == p.name && rec.method == m.name() {
                    auroc.push(rec.auroc);
                    aupr.push(rec.aupr);
                    tnr.push(rec.tnr_at_95tpr);
                }
            }
            pooled.push(Pooled {
                method: m,
                auroc,
                aupr,
                tnr,
            });
        }
        let mut best = 0usize;
        for (i, entry) in pooled.iter().enumerate() {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            if mean(&entry.auroc) > mean(&pooled[best].auroc) {
                best = i;
            }
        }
        let best_aurocs = pooled[best].auroc.clone();
        let methods = pooled
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let p_value = if i == best {
                    Some(1.0)
                } else {
                    eval::welch_t_test(&e.auroc, &best_aurocs).ok()
                };
                MethodSummary {
                    method: e.method.name().into(),
                    best: i == best,
                    metrics: MetricsReport {
                        auroc: MetricSummary::from_runs(e.auroc),
                        aupr: MetricSummary::from_runs(e.aupr),
                        tnr_at_95tpr: MetricSummary::from_runs(e.tnr),
                        p_value_vs_best: p_value,
                    },
                }
            })
            .collect();
        out.push(DatasetReport {
            dataset: p.name.clone(),
            classes: p.classes.clone(),
            methods,
        });
    }
    out
}

pub fn execute(r: &Resolved, workers: usize) -> Result<Report> {
    let started = Instant::now();
    let prepared = prepare(r)?;
    let mut specs = Vec::new();
    for (di, p) in prepared.iter().enumerate() {
        for &m in &r.methods {
            for &c in &p.classes {
                for repeat in 0..r.repeats {
                    specs.push(JobSpec {
                        ds: di,
                        method: m,
                        class: c,
                        repeat,
                    });
                }
            }
        }
    }
    let records = parallel_map(specs.len(), workers, |i| {
        let s = &specs[i];
        let p = &prepared[s.ds];
        run_one(r, p, s).map_err(|e| {
            with_context(
                e,
                &format!(
                    "{} {} class {} repeat {}",
                    p.name, s.method, s.class, s.repeat
                ),
            )
        })
    })?;
    let datasets = aggregate(r, &prepared, &records);
    Ok(Report {
        config_hash: config_hash(r),
        score_convention: SCORE_CONVENTION.into(),
        protocol: match r.protocol {
            Protocol::OneVsAll => "one-vs-all".into(),
            Protocol::Direct => "direct".into(),
        },
        late_fusion: r.late_fusion.name().into(),
        repeats: r.repeats,
        seed: r.seed,
        datasets,
        runs: records,
        wall_ms_total: started.elapsed().as_millis() as u64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Rank,
    Margin,
    Alpha,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" | "rank" => Ok(Self::Rank),
            "m" | "margin" => Ok(Self::Margin),
            "alpha" => Ok(Self::Alpha),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' (choose R, m, or alpha)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rank => "R",
            Self::Margin => "m",
            Self::Alpha => "alpha",
        }
    }

    fn check_applies(self, method: MethodId) -> Result<()> {
        let ok = match self {
            Self::Rank => method == MethodId::Tf,
            Self::Margin => method == MethodId::Sim,
            Self::Alpha => method.is_alignment(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "parameter {} does not apply to method {method}",
                self.name()
            )))
        }
    }
}

pub fn sweep_execute(
    r: &Resolved,
    param: &str,
    grid: &[f64],
    workers: usize,
) -> Result<SweepReport> {
    let started = Instant::now();
    if r.methods.len() != 1 {
        return Err(Error::Config(format!(
            "sweep needs exactly one method, got {}",
            r.methods.len()
        )));
    }
    let method = r.methods[0];
    let param = SweepParam::parse(param)?;
    param.check_applies(method)?;
    if grid.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut r2 = r.clone();
        match param {
            SweepParam::Rank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "rank grid values must be positive integers, got {value}"
                    )));
                }
                r2.overrides.rank = Some(value as usize);
            }
            SweepParam::Margin => {
                if value < 0.0 {
                    return Err(Error::Config(format!("margin must be >= 0, got {value}")));
                }
                r2.overrides.margin = Some(value);
            }
            SweepParam::Alpha => {
                if value < 0.0 {
                    return Err(Error::Config(format!("alpha must be >= 0, got {value}")));
                }
                r2.overrides.alpha = Some(value);
            }
        }
        let report = execute(&r2, workers)?;
        points.push(SweepPoint {
            value,
            datasets: report.datasets,
        });
    }
    Ok(SweepReport {
        config_hash: config_hash(r),
        method: method.name().into(),
        param: param.name().into(),
        grid: grid.to_vec(),
        points,
        wall_ms_total: started.elapsed().as_millis() as u64,
    })
}

/// Hindsight reference: per-view autoencoders with a shared training seed
/// (identical views therefore tie exactly), best view picked by test AUROC.
pub fn bsv_execute(r: &Resolved, workers: usize) -> Result<BsvReport> {
    let started = Instant::now();
    let prepared = prepare(r)?;
    let mut specs = Vec::new();
    for (di, p) in prepared.iter().enumerate() {
        for &c in &p.classes {
            for repeat in 0..r.repeats {
                specs.push(JobSpec {
                    ds: di,
                    method: MethodId::Dae,
                    class: c,
                    repeat,
                });
            }
        }
    }
    let records = parallel_map(specs.len(), workers, |i| {
        let s = &specs[i];
        let p = &prepared[s.ds];
        bsv_one(r, p, s).map_err(|e| {
            with_context(
                e,
                &format!(
                    "{} single-view class {} repeat {}",
                    p.name, s.class, s.repeat
                ),
            )
        })
    })?;
    let mut datasets = Vec::with_capacity(prepared.len());
    for p in &prepared {
        let v_count = p.ds.n_views();
        let mut per_view: Vec<Vec<f64>> = vec![Vec::new(); v_count];
        for rec in &records {
            if rec.dataset == p.name {
                for (v, &a) in rec.per_view_auroc.iter().enumerate() {
                    per_view[v].push(a);
                }
            }
        }
        let mut best = 0usize;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for v in 1..v_count {
            if mean(&per_view[v]) > mean(&per_view[best]) {
                best = v;
            }
        }
        let views = per_view
            .into_iter()
            .enumerate()
            .map(|(v, aurocs)| ViewSummary {
                view: v,
                name: p.ds.view_names[v].clone(),
                best: v == best,
                auroc: MetricSummary::from_runs(aurocs),
            })
            .collect();
        datasets.push(BsvDatasetReport {
            dataset: p.name.clone(),
            classes: p.classes.clone(),
            views,
            best_view: best,
        });
    }
    Ok(BsvReport {
        hindsight_reference: true,
        config_hash: config_hash(r),
        score_convention: SCORE_CONVENTION.into(),
        repeats: r.repeats,
        seed: r.seed,
        datasets,
        runs: records,
        wall_ms_total: started.elapsed().as_millis() as u64,
    })
}

fn bsv_one(r: &Resolved, p: &Prepared, s: &JobSpec) -> Result<BsvRunRecord> {
    let t0 = Instant::now();
    let (split_seed, data) = make_split(r, p, s.class, s.repeat)?;
    // one seed for all views: identical views must tie exactly
    let train_seed = train_seed(r.seed, &p.name, "DAE1", s.class, s.repeat);
    let dims = p.ds.view_dims();
    let mut per_view_auroc = Vec::with_capacity(dims.len());
    for v in 0..dims.len() {
        let mut mc = MethodConfig::new(MethodId::Dae, vec![dims[v]]);
        r.overrides.apply(&mut mc)?;
        mc.seed = train_seed;
        let (model, _) = train_with_log(&mc, &data.train[v..v + 1])?;
        let scores = score(&model, &data.test[v..v + 1])?;
        let fused = late_fuse(r.late_fusion, &scores)?;
        per_view_auroc.push(eval::auroc(&fused, &data.labels)?);
    }
    Ok(BsvRunRecord {
        dataset: p.name.clone(),
        class: s.class,
        repeat: s.repeat,
        split_seed,
        train_seed,
        per_view_auroc,
        wall_ms: t0.elapsed().as_millis() as u64,
    })
}
