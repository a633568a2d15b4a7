//! Experiment runner: data generation, fitting, sampling and BPD tables,
//! score-MSE studies and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::densities::{bpd, Density, GaussMixture};
use crate::diffusion::{score_mse, train, DiffusionSchedule, ScoreNetwork, Stopwatch, TimeInput, TrainConfig};
use crate::error::{Error, Result};
use crate::kde::{Bandwidth, KdeModel, Kernel};
use crate::numerics::{Matrix, Rng};
use crate::sampler::{
    langevin_sample, reverse_sde_sample, train_vanilla_sm, AnalyticScore, LangevinConfig, LearnedScore, SamplerConfig,
    TimeGrid,
};
use crate::wsnn::forward;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Diffusion,
    KdeGaussian,
    KdeUniform,
    VanillaSm,
    /// Reverse SDE driven by the exact score; ignores the training data.
    Analytic,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Diffusion,
        Method::KdeGaussian,
        Method::KdeUniform,
        Method::VanillaSm,
        Method::Analytic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Diffusion => "diffusion",
            Method::KdeGaussian => "kde-g",
            Method::KdeUniform => "kde-u",
            Method::VanillaSm => "vanilla-sm",
            Method::Analytic => "analytic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }

    fn stream(self) -> u64 {
        Method::ALL.iter().position(|m| *m == self).expect("listed") as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// 1: isotropic Gaussian, 2: grid MRF Gaussian, 3: Gaussian mixture.
    pub case: u8,
    /// Grid side; the data dimension is `K²`.
    pub k: usize,
    /// Mixture components (case 3).
    pub m: usize,
    pub n_list: Vec<usize>,
    pub n_eval: usize,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub repetitions: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub em_steps: usize,
    /// Hidden widths; a single entry is repeated `arch_depth` times.
    pub arch_widths: Vec<usize>,
    pub arch_depth: usize,
    pub bound: f64,
    pub time_input: TimeInput,
    pub mrf_a: f64,
    pub mrf_b: f64,
    pub langevin_h: f64,
    pub langevin_steps: usize,
    /// Record wall-clock runtimes; off keeps reports byte-reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            case: 1,
            k: 3,
            m: 3,
            n_list: vec![100, 500, 2000],
            n_eval: 3000,
            methods: vec![Method::Diffusion, Method::KdeGaussian, Method::KdeUniform],
            seed: 0,
            repetitions: 3,
            steps: 2000,
            batch: 128,
            lr: 1e-3,
            t_min: 1e-3,
            t_max: 3.0,
            em_steps: 500,
            arch_widths: vec![64],
            arch_depth: 2,
            bound: 100.0,
            time_input: TimeInput::Time,
            mrf_a: 1.0,
            mrf_b: -0.2,
            langevin_h: 0.01,
            langevin_steps: 1000,
            timing: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("bad value {value:?} for {key}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

impl ExperimentConfig {
    pub const KEYS: [&'static str; 24] = [
        "case",
        "K",
        "M",
        "n_list",
        "n_eval",
        "methods",
        "seed",
        "repetitions",
        "steps",
        "batch",
        "lr",
        "T_min",
        "T_max",
        "em_steps",
        "arch.widths",
        "arch.depth",
        "arch.bound",
        "arch.time_input",
        "mrf.a",
        "mrf.b",
        "langevin.h",
        "langevin.steps",
        "timing",
        "n",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "case" => self.case = parse_num(key, v)?,
            "K" => self.k = parse_num(key, v)?,
            "M" => self.m = parse_num(key, v)?,
            "n_list" | "n" => self.n_list = parse_list(key, v)?,
            "n_eval" => self.n_eval = parse_num(key, v)?,
            "methods" => self.methods = v.split(',').map(|s| Method::parse(s.trim())).collect::<Result<_>>()?,
            "seed" => self.seed = parse_num(key, v)?,
            "repetitions" => self.repetitions = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "T_min" => self.t_min = parse_num(key, v)?,
            "T_max" => self.t_max = parse_num(key, v)?,
            "em_steps" => self.em_steps = parse_num(key, v)?,
            "arch.widths" => self.arch_widths = parse_list(key, v)?,
            "arch.depth" => self.arch_depth = parse_num(key, v)?,
            "arch.bound" => self.bound = parse_num(key, v)?,
            "arch.time_input" => self.time_input = TimeInput::parse(v)?,
            "mrf.a" => self.mrf_a = parse_num(key, v)?,
            "mrf.b" => self.mrf_b = parse_num(key, v)?,
            "langevin.h" => self.langevin_h = parse_num(key, v)?,
            "langevin.steps" => self.langevin_steps = parse_num(key, v)?,
            "timing" => self.timing = parse_num(key, v)?,
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    /// Flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                cfg.apply_override(line)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let methods: Vec<&str> = self.methods.iter().map(|m| m.name()).collect();
        let mut s = String::new();
        for (k, v) in [
            ("case", self.case.to_string()),
            ("K", self.k.to_string()),
            ("M", self.m.to_string()),
            ("n_list", join(&self.n_list)),
            ("n_eval", self.n_eval.to_string()),
            ("methods", methods.join(",")),
            ("seed", self.seed.to_string()),
            ("repetitions", self.repetitions.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("T_min", format!("{:?}", self.t_min)),
            ("T_max", format!("{:?}", self.t_max)),
            ("em_steps", self.em_steps.to_string()),
            ("arch.widths", join(&self.arch_widths)),
            ("arch.depth", self.arch_depth.to_string()),
            ("arch.bound", format!("{:?}", self.bound)),
            ("arch.time_input", self.time_input.name().to_string()),
            ("mrf.a", format!("{:?}", self.mrf_a)),
            ("mrf.b", format!("{:?}", self.mrf_b)),
            ("langevin.h", format!("{:?}", self.langevin_h)),
            ("langevin.steps", self.langevin_steps.to_string()),
            ("timing", self.timing.to_string()),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(1..=3).contains(&self.case) {
            return bad("case must be 1, 2 or 3");
        }
        if self.k < 2 {
            return bad("K must be at least 2");
        }
        if self.m < 1 {
            return bad("M must be at least 1");
        }
        if self.n_eval < 1 {
            return bad("n_eval must be at least 1");
        }
        if self.n_list.is_empty() || self.n_list.contains(&0) {
            return bad("n_list must hold positive sizes");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if self.em_steps == 0 {
            return bad("em_steps must be at least 1");
        }
        if self.arch_widths.is_empty() || self.arch_widths.contains(&0) {
            return bad("arch.widths must be positive");
        }
        if self.arch_widths.len() > 1 && self.arch_widths.len() != self.arch_depth {
            return bad("arch.widths must list one width or arch.depth widths");
        }
        self.schedule()?;
        self.train_config(0).validate()
    }

    pub fn dim(&self) -> usize {
        self.k * self.k
    }

    /// Grid side for cases 1-2, component count for case 3.
    pub fn size(&self) -> usize {
        if self.case == 3 {
            self.m
        } else {
            self.k
        }
    }

    pub fn hidden(&self) -> Vec<usize> {
        if self.arch_widths.len() == 1 {
            vec![self.arch_widths[0]; self.arch_depth]
        } else {
            self.arch_widths.clone()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::ou(self.t_min, self.t_max)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch,
            learning_rate: self.lr,
            steps: self.steps,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Ground-truth density; mixture means come from a dedicated seed stream.
    pub fn density(&self) -> Result<Density> {
        match self.case {
            1 => Ok(Density::iso_gaussian(self.dim())),
            2 => Density::grid_mrf(self.k, self.mrf_a, self.mrf_b),
            3 => {
                let mut rng = Rng::new(self.seed).split_path(&[0, u64::MAX]);
                Ok(Density::Mixture(GaussMixture::random(self.dim(), self.m, &mut rng)?))
            }
            c => Err(Error::InvalidConfig(format!("unknown case {c}"))),
        }
    }
}

/// One benchmark cell. `bpd` is `None` when the cell failed; `status` then
/// holds the error name.
#[derive(Clone, Debug, PartialEq)]
pub struct BpdRow {
    pub case: u8,
    pub size: usize,
    pub method: Method,
    pub n: usize,
    pub repetition: usize,
    pub bpd: Option<f64>,
    pub runtime_s: f64,
    pub status: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpdReport {
    pub rows: Vec<BpdRow>,
}

pub const REPORT_HEADER: [&str; 8] = [
    "case",
    "size",
    "method",
    "n",
    "repetition",
    "bpd",
    "runtime_s",
    "status",
];

fn format_float(v: f64) -> String {
    format!("{v:?}")
}

impl BpdRow {
    fn record(&self) -> [String; 8] {
        [
            self.case.to_string(),
            self.size.to_string(),
            self.method.name().to_string(),
            self.n.to_string(),
            self.repetition.to_string(),
            self.bpd.map(format_float).unwrap_or_default(),
            format_float(self.runtime_s),
            self.status.clone(),
        ]
    }
}

/// Writes rows as they arrive so partial results survive an abort.
pub struct ReportWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ReportWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(REPORT_HEADER)?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, row: &BpdRow) -> Result<()> {
        self.inner.write_record(row.record())?;
        self.inner.flush()?;
        Ok(())
    }
}

impl BpdReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = ReportWriter::new(out)?;
        for row in &self.rows {
            w.push(row)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != REPORT_HEADER {
            return Err(Error::Parse(format!("unexpected report header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            rows.push(BpdRow {
                case: parse_num("case", f(0))?,
                size: parse_num("size", f(1))?,
                method: Method::parse(f(2))?,
                n: parse_num("n", f(3))?,
                repetition: parse_num("repetition", f(4))?,
                bpd: if f(5).is_empty() {
                    None
                } else {
                    Some(parse_num("bpd", f(5))?)
                },
                runtime_s: parse_num("runtime_s", f(6))?,
                status: f(7).to_string(),
            });
        }
        Ok(Self { rows })
    }
}

/// Samples of size `n_eval` from the model fitted by `method` to `data`.
fn generate(method: Method, config: &ExperimentConfig, density: &Density, data: &Matrix, seed: u64) -> Result<Matrix> {
    let schedule = config.schedule()?;
    let d = config.dim();
    let mut rng = Rng::new(seed);
    let sampler = |seed| SamplerConfig {
        n_steps: config.em_steps,
        n_samples: config.n_eval,
        seed,
        grid: TimeGrid::Uniform,
    };
    match method {
        Method::KdeGaussian | Method::KdeUniform => {
            let kernel = if method == Method::KdeGaussian {
                Kernel::Gaussian
            } else {
                Kernel::Uniform
            };
            KdeModel::fit(data, kernel, Bandwidth::Scott)?.sample(config.n_eval, &mut rng)
        }
        Method::Diffusion => {
            let init = ScoreNetwork::mlp(d, &config.hidden(), config.time_input, config.bound, &mut rng.split(0))?;
            let (net, _) = train(data, &init, &schedule, &config.train_config(rng.split(1).next_u64()))?;
            reverse_sde_sample(
                &LearnedScore::new(&net, &schedule),
                &schedule,
                &sampler(rng.split(2).next_u64()),
            )
        }
        Method::VanillaSm => {
            let init = ScoreNetwork::mlp(d, &config.hidden(), TimeInput::None, config.bound, &mut rng.split(0))?;
            let (params, _) = train_vanilla_sm(
                data,
                &init.arch,
                &init.params,
                &config.train_config(rng.split(1).next_u64()),
            )?;
            let mut net = init;
            net.params = params;
            let score = LearnedScore::new(&net, &schedule);
            let cfg = LangevinConfig {
                step_size: config.langevin_h,
                n_steps: config.langevin_steps,
                n_samples: config.n_eval,
                seed: rng.split(2).next_u64(),
            };
            langevin_sample(&score, &cfg)
        }
        Method::Analytic => {
            let score = AnalyticScore::new(density, &schedule)?;
            reverse_sde_sample(&score, &schedule, &sampler(rng.split(2).next_u64()))
        }
    }
}

/// Seed of the training data for `(n, repetition)`; shared by all methods.
fn data_seed(config: &ExperimentConfig, n: usize, rep: usize) -> u64 {
    Rng::new(config.seed).split_path(&[0, n as u64, rep as u64]).next_u64()
}

fn method_seed(config: &ExperimentConfig, n: usize, rep: usize, method: Method) -> u64 {
    Rng::new(config.seed)
        .split_path(&[method.stream(), n as u64, rep as u64])
        .next_u64()
}

/// Runs one cell; errors become a row with an empty BPD.
pub fn run_cell(config: &ExperimentConfig, density: &Density, method: Method, n: usize, rep: usize) -> BpdRow {
    let clock = Stopwatch::start();
    let result = density
        .sample(n, &mut Rng::new(data_seed(config, n, rep)))
        .and_then(|data| generate(method, config, density, &data, method_seed(config, n, rep, method)))
        .and_then(|samples| bpd(density, &samples));
    let runtime_s = if config.timing { clock.seconds() } else { 0.0 };
    let (value, status) = match result {
        Ok(est) if est.infinite => (Some(f64::INFINITY), "InfiniteBpd".to_string()),
        Ok(est) => (Some(est.bpd), "ok".to_string()),
        Err(e) => (None, e.name().to_string()),
    };
    BpdRow {
        case: config.case,
        size: config.size(),
        method,
        n,
        repetition: rep,
        bpd: value,
        runtime_s,
        status,
    }
}

/// Every `(n, method, repetition)` cell in config order, handing each row
/// to `sink` as soon as it is computed.
pub fn run_case_streaming(config: &ExperimentConfig, mut sink: impl FnMut(&BpdRow) -> Result<()>) -> Result<BpdReport> {
    config.validate()?;
    let density = config.density()?;
    let mut report = BpdReport::default();
    for &n in &config.n_list {
        for &method in &config.methods {
            for rep in 0..config.repetitions {
                let row = run_cell(config, &density, method, n, rep);
                sink(&row)?;
                report.rows.push(row);
            }
        }
    }
    Ok(report)
}

pub fn run_case(config: &ExperimentConfig) -> Result<BpdReport> {
    run_case_streaming(config, |_| Ok(()))
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean finite BPD per `(method, n)` for one `(case, size)` group.
fn series(rows: &[&BpdRow]) -> BTreeMap<Method, Vec<(usize, f64)>> {
    let mut acc: BTreeMap<(Method, usize), (f64, usize)> = BTreeMap::new();
    for r in rows {
        if let Some(b) = r.bpd.filter(|b| b.is_finite()) {
            let e = acc.entry((r.method, r.n)).or_insert((0.0, 0));
            e.0 += b;
            e.1 += 1;
        }
    }
    let mut out: BTreeMap<Method, Vec<(usize, f64)>> = BTreeMap::new();
    for ((m, n), (sum, count)) in acc {
        out.entry(m).or_default().push((n, sum / count as f64));
    }
    out
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-9);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|s| s * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    while t <= hi + 1e-12 {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Self-contained SVG of BPD against `n` (log axis), one polyline per method.
pub fn render_svg(title: &str, series: &BTreeMap<Method, Vec<(usize, f64)>>) -> String {
    let pts: Vec<(f64, f64)> = series
        .values()
        .flatten()
        .map(|&(n, b)| ((n as f64).log10(), b))
        .collect();
    let (mut x0, mut x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.1).max(0.05);
    y0 -= pad;
    y1 += pad;
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}" style="font-family:sans-serif;font-size:12px;background:#fff">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" style="font-size:14px">{title}</text>"#,
        SVG_W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" style="stroke:#000"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" style="stroke:#000"/>"#,
        m = MARGIN,
        b = SVG_H - MARGIN,
        r = SVG_W - MARGIN,
        t = MARGIN
    );
    let decades = (x0.floor() as i32)..=(x1.ceil() as i32);
    for e in decades {
        for mult in [1.0, 2.0, 5.0] {
            let lx = (mult * 10f64.powi(e)).log10();
            if lx < x0 - 1e-9 || lx > x1 + 1e-9 {
                continue;
            }
            let label = mult * 10f64.powi(e);
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{b}" x2="{x:.2}" y2="{b2}" style="stroke:#000"/><text x="{x:.2}" y="{ty}" text-anchor="middle">{label}</text>"#,
                x = sx(lx),
                b = SVG_H - MARGIN,
                b2 = SVG_H - MARGIN + 5.0,
                ty = SVG_H - MARGIN + 18.0
            );
        }
    }
    for t in nice_ticks(y0, y1) {
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{y:.2}" x2="{m}" y2="{y:.2}" style="stroke:#000"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{t:.3}</text>"#,
            a = MARGIN - 5.0,
            m = MARGIN,
            y = sy(t),
            tx = MARGIN - 8.0,
            ty = sy(t) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">training size n</text>"#,
        SVG_W / 2.0,
        SVG_H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">bits per dimension</text>"#,
        y = SVG_H / 2.0
    );
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(n, b)| format!("{:.2},{:.2}", sx((n as f64).log10()), sy(b)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-method="{}" points="{}" style="fill:none;stroke:{color};stroke-width:2"/>"#,
            method.name(),
            coords.join(" ")
        );
        for &(n, b) in pts {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" style="fill:{color}"/>"#,
                sx((n as f64).log10()),
                sy(b)
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" style="stroke:{color};stroke-width:2"/><text x="{tx}" y="{ty}">{}</text>"#,
            method.name(),
            a = SVG_W - MARGIN - 110.0,
            b = SVG_W - MARGIN - 90.0,
            tx = SVG_W - MARGIN - 84.0,
            ty = ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One SVG per `(case, size)` plus `bpd_report.csv` in `out_dir`.
pub fn emit_plots(report: &BpdReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    fs::create_dir_all(out_dir)?;
    let mut groups: BTreeMap<(u8, usize), Vec<&BpdRow>> = BTreeMap::new();
    for r in &report.rows {
        groups.entry((r.case, r.size)).or_default().push(r);
    }
    let mut written = Vec::new();
    for ((case, size), rows) in groups {
        let label = if case == 3 { "M" } else { "K" };
        let svg = render_svg(&format!("Case {case}, {label} = {size}"), &series(&rows));
        let path = out_dir.join(format!("bpd_case{case}_size{size}.svg"));
        fs::write(&path, svg)?;
        written.push(path);
    }
    let csv_path = out_dir.join("bpd_report.csv");
    report.write_csv(fs::File::create(&csv_path)?)?;
    written.push(csv_path);
    Ok(written)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMseRow {
    pub n: usize,
    pub repetition: usize,
    pub score_mse_init: f64,
    pub score_mse: f64,
    pub std_error: f64,
}

/// Score MSE of the trained diffusion network for each training size.
pub fn score_mse_study(config: &ExperimentConfig, n_mc: usize) -> Result<Vec<ScoreMseRow>> {
    config.validate()?;
    let density = config.density()?;
    let schedule = config.schedule()?;
    let mut rows = Vec::new();
    for &n in &config.n_list {
        for rep in 0..config.repetitions {
            let data = density.sample(n, &mut Rng::new(data_seed(config, n, rep)))?;
            let rng = Rng::new(method_seed(config, n, rep, Method::Diffusion));
            let init = ScoreNetwork::mlp(
                config.dim(),
                &config.hidden(),
                config.time_input,
                config.bound,
                &mut rng.split(0),
            )?;
            let (net, _) = train(&data, &init, &schedule, &config.train_config(rng.split(1).next_u64()))?;
            let eval_seed = Rng::new(config.seed).split_path(&[99, n as u64, rep as u64]);
            let before = score_mse(
                &LearnedScore::new(&init, &schedule),
                &density,
                &schedule,
                n_mc,
                &mut eval_seed.clone(),
            )?;
            let after = score_mse(
                &LearnedScore::new(&net, &schedule),
                &density,
                &schedule,
                n_mc,
                &mut eval_seed.clone(),
            )?;
            rows.push(ScoreMseRow {
                n,
                repetition: rep,
                score_mse_init: before.mean,
                score_mse: after.mean,
                std_error: after.std_error,
            });
        }
    }
    Ok(rows)
}

pub fn write_score_mse_csv<W: Write>(out: W, rows: &[ScoreMseRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "repetition", "score_mse_init", "score_mse", "std_error"])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.repetition.to_string(),
            format_float(r.score_mse_init),
            format_float(r.score_mse),
            format_float(r.std_error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluates a time-free network at `x` (used by the CLI for vanilla models).
pub fn eval_time_free(net: &ScoreNetwork, x: &[f64]) -> Result<Vec<f64>> {
    forward(&net.arch, &net.params, x)
}
