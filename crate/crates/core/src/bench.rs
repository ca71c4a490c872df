//! Experiment runner: sweeps QBER x mode x latency x stages and reports one
//! row of statistics per cell.

use std::fmt;
use std::io::Write;
use std::net::TcpListener;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::bitframe::FRAME_BITS;
use crate::cascade::{ProtocolContext, ProtocolOptions, Role};
use crate::error::{param, Error, Result};
use crate::metrics::{FrameTotals, ReconStats};
use crate::params::{build_schedule, BlockSchedule, CombinationMode};
use crate::pipeline::{
    run_correcting, run_dual, run_reference, BscFrames, FrameSource, PipelineConfig,
    PipelineReport, SchedulerStats,
};
use crate::transport::{tcp_accept, tcp_connect, ChannelConfig};

pub const CSV_HEADER: [&str; 13] = [
    "qber",
    "mode",
    "latency_ms",
    "stages",
    "frames",
    "f",
    "f_fer",
    "fer",
    "rounds_mean",
    "throughput_bps",
    "m_star",
    "collisions_avoided",
    "searchlist_calls",
];

/// Block-length schedule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModeChoice {
    Adaptive(CombinationMode),
    /// Original Cascade: four passes, `k1 ~ 0.73/eps`, doubling.
    Original,
}

impl ModeChoice {
    pub fn label(self) -> &'static str {
        match self {
            ModeChoice::Adaptive(m) => m.short_name(),
            ModeChoice::Original => "orig",
        }
    }

    pub fn schedule(self, qber: f64) -> Result<BlockSchedule> {
        match self {
            ModeChoice::Adaptive(m) => build_schedule(qber, FRAME_BITS, m),
            ModeChoice::Original => BlockSchedule::original_cascade(qber, FRAME_BITS),
        }
    }
}

impl FromStr for ModeChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("orig") {
            return Ok(ModeChoice::Original);
        }
        s.parse().map(ModeChoice::Adaptive)
    }
}

impl fmt::Display for ModeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Tcp,
}

/// Which parties this process runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunRole {
    Reference,
    Correcting,
    Both,
}

/// Comparison variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    /// One session per worker: every round trip serves a single frame.
    StopAndWait,
    /// Every backtracking event scans the list.
    NoCollisionDetection,
    OriginalSchedule,
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub qber_list: Vec<f64>,
    /// Error rate the schedule is built for; the true rate when `None`.
    pub qber_estimated: Option<f64>,
    pub mode_list: Vec<ModeChoice>,
    pub latency_list_ms: Vec<f64>,
    pub jitter_ms: f64,
    pub stages_list: Vec<usize>,
    pub workers: usize,
    pub frames_per_cell: u64,
    pub seed: u64,
    pub transport: TransportKind,
    pub role: RunRole,
    pub collision_detection: bool,
    pub listen: Option<String>,
    pub connect: Option<String>,
    pub round_cap: Option<u32>,
    /// Compare each corrected frame with the reference copy (in-process only).
    pub audit: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            qber_list: vec![0.01],
            qber_estimated: None,
            mode_list: vec![ModeChoice::Adaptive(CombinationMode::HighEfficiency)],
            latency_list_ms: vec![0.0],
            jitter_ms: 0.0,
            stages_list: vec![4],
            workers: PipelineConfig::default().workers,
            frames_per_cell: 100,
            seed: 1,
            transport: TransportKind::Sim,
            role: RunRole::Both,
            collision_detection: true,
            listen: None,
            connect: None,
            round_cap: None,
            audit: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub qber: f64,
    pub qber_estimated: f64,
    pub mode: ModeChoice,
    pub latency_ms: f64,
    pub stages: usize,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub frames: u64,
    /// Present when this process ran the correcting party.
    pub stats: Option<ReconStats>,
    pub scheduler: Option<SchedulerStats>,
    /// Verified frames that still differ from the reference (audit only).
    pub silent_mismatches: u64,
    pub error: Option<String>,
}

impl ExperimentPlan {
    pub fn with_baseline(mut self, b: Baseline) -> Self {
        match b {
            Baseline::StopAndWait => self.stages_list = vec![1],
            Baseline::NoCollisionDetection => self.collision_detection = false,
            Baseline::OriginalSchedule => self.mode_list = vec![ModeChoice::Original],
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.qber_list.is_empty()
            || self.mode_list.is_empty()
            || self.latency_list_ms.is_empty()
            || self.stages_list.is_empty()
        {
            return Err(param("every sweep list needs at least one value"));
        }
        if self.frames_per_cell == 0 || self.workers == 0 {
            return Err(param("frames and workers must be at least 1"));
        }
        if self.stages_list.contains(&0) {
            return Err(param("stages must be at least 1"));
        }
        for &q in self.qber_list.iter().chain(self.qber_estimated.iter()) {
            if !(q > 0.0 && q < 0.5) {
                return Err(param(format!("qber must lie in (0, 0.5), got {q}")));
            }
        }
        for &l in &self.latency_list_ms {
            ChannelConfig::new(l, self.jitter_ms, 0)?;
        }
        match (self.transport, self.role) {
            (TransportKind::Tcp, RunRole::Reference) if self.listen.is_none() => {
                Err(param("the reference party over TCP needs --listen"))
            }
            (TransportKind::Tcp, RunRole::Correcting) if self.connect.is_none() => {
                Err(param("the correcting party over TCP needs --connect"))
            }
            (TransportKind::Sim, RunRole::Reference | RunRole::Correcting) => Err(param(
                "a single party needs the TCP transport; the simulated link runs both",
            )),
            _ => Ok(()),
        }
    }

    /// Cells in sweep order: qber, mode, latency, stages.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &qber in &self.qber_list {
            for &mode in &self.mode_list {
                for &latency_ms in &self.latency_list_ms {
                    for &stages in &self.stages_list {
                        out.push(Cell {
                            qber,
                            qber_estimated: self.qber_estimated.unwrap_or(qber),
                            mode,
                            latency_ms,
                            stages,
                        });
                    }
                }
            }
        }
        out
    }

    fn context(&self, cell: &Cell) -> Result<Arc<ProtocolContext>> {
        let opts = ProtocolOptions {
            collision_detection: self.collision_detection,
            allow_scaled: false,
            round_cap: self.round_cap,
        };
        ProtocolContext::new(cell.mode.schedule(cell.qber_estimated)?, self.seed, opts)
    }

    fn frames(&self, cell: &Cell, side: Role) -> Arc<dyn FrameSource> {
        Arc::new(BscFrames {
            frame_bits: FRAME_BITS,
            qber: cell.qber,
            seed: self.seed,
            side,
        })
    }
}

/// Runs one cell. Failures are reported in the result, not returned, so
/// a sweep can carry on.
pub fn run_cell(plan: &ExperimentPlan, cell: Cell) -> CellResult {
    let mut result = CellResult {
        cell,
        frames: plan.frames_per_cell,
        stats: None,
        scheduler: None,
        silent_mismatches: 0,
        error: None,
    };
    if let Err(e) = try_run_cell(plan, &cell, &mut result) {
        result.error = Some(e.to_string());
    }
    result
}

fn try_run_cell(plan: &ExperimentPlan, cell: &Cell, result: &mut CellResult) -> Result<()> {
    plan.validate()?;
    let ctx = plan.context(cell)?;
    let cfg = PipelineConfig {
        workers: plan.workers,
        stages: cell.stages,
        ..PipelineConfig::default()
    };
    let frames = plan.frames_per_cell;
    let report: PipelineReport = match (plan.transport, plan.role) {
        (TransportKind::Sim, _) => {
            let link = ChannelConfig::new(cell.latency_ms, plan.jitter_ms, plan.seed)?;
            let a = plan.frames(cell, Role::Reference);
            let b = plan.frames(cell, Role::Correcting);
            run_dual(&cfg, &ctx, frames, link, a, b, plan.audit)?.0
        }
        (TransportKind::Tcp, RunRole::Both) => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let (rcfg, rctx, a) = (cfg.clone(), ctx.clone(), plan.frames(cell, Role::Reference));
            let alice = thread::spawn(move || {
                let link = tcp_accept(&listener)?;
                run_reference(&rcfg, &rctx, frames, link, a)
            });
            let link = tcp_connect(addr, Duration::from_secs(10))?;
            let audit = plan.audit.then(|| plan.frames(cell, Role::Reference));
            let bob = run_correcting(&cfg, &ctx, frames, link, plan.frames(cell, Role::Correcting), audit);
            alice.join().expect("reference party panicked")?;
            bob?
        }
        (TransportKind::Tcp, RunRole::Correcting) => {
            let addr = plan.connect.as_deref().expect("validated");
            let link = tcp_connect(addr, Duration::from_secs(30))?;
            run_correcting(&cfg, &ctx, frames, link, plan.frames(cell, Role::Correcting), None)?
        }
        (TransportKind::Tcp, RunRole::Reference) => {
            let listener = TcpListener::bind(plan.listen.as_deref().expect("validated"))?;
            let link = tcp_accept(&listener)?;
            let r = run_reference(&cfg, &ctx, frames, link, plan.frames(cell, Role::Reference))?;
            result.scheduler = Some(r.stats);
            return Ok(());
        }
    };
    let mut totals = FrameTotals::default();
    for o in &report.outcomes {
        totals.add(&o.record);
        if o.record.verified && o.residual_errors.is_some_and(|r| r > 0) {
            result.silent_mismatches += 1;
        }
    }
    if report.tapped_disclosure_bits != totals.m_all {
        return Err(Error::Protocol(format!(
            "leak audit: {} bits on the wire, {} accounted",
            report.tapped_disclosure_bits, totals.m_all
        )));
    }
    result.stats = Some(totals.finish(cell.qber, report.stats.wall)?);
    result.scheduler = Some(report.stats);
    Ok(())
}

pub fn run_plan(plan: &ExperimentPlan) -> Vec<CellResult> {
    plan.cells().into_iter().map(|c| run_cell(plan, c)).collect()
}

/// `printf("%.*g")`: `digits` significant digits, trailing zeros dropped.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim(&format!("{x:.decimals$}"))
    }
}

fn row(r: &CellResult) -> Vec<String> {
    let g = |x: f64| format_sig(x, 6);
    let c = &r.cell;
    let mut out = vec![
        g(c.qber),
        c.mode.label().to_string(),
        g(c.latency_ms),
        c.stages.to_string(),
        r.frames.to_string(),
    ];
    match &r.stats {
        Some(s) => out.extend([
            g(s.f),
            g(s.f_fer),
            g(s.fer),
            g(s.rounds_mean),
            g(s.throughput_bps),
            s.m_star.to_string(),
            s.collisions_avoided.to_string(),
            s.searchlist_calls.to_string(),
        ]),
        None => out.extend(std::iter::repeat_n(String::new(), 8)),
    }
    out
}

pub fn write_csv<W: Write>(rows: &[CellResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record(row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(rows: &[CellResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("cannot write {}: {e}", path.display()),
        ))
    })?;
    write_csv(rows, std::io::BufWriter::new(file))
}

/// Human-readable table of the rows.
pub fn summary(rows: &[CellResult]) -> String {
    let mut s = format!(
        "{:>7} {:>5} {:>8} {:>6} {:>8} {:>8} {:>9} {:>8} {:>12}\n",
        "qber", "mode", "lat_ms", "stages", "f", "f_fer", "fer", "rounds", "Mbps"
    );
    for r in rows {
        let c = &r.cell;
        match (&r.stats, &r.error) {
            (_, Some(e)) => s += &format!(
                "{:>7} {:>5} {:>8} {:>6}  error: {e}\n",
                c.qber, c.mode.label(), c.latency_ms, c.stages
            ),
            (Some(st), None) => s += &format!(
                "{:>7} {:>5} {:>8} {:>6} {:>8.4} {:>8.4} {:>9.2e} {:>8.1} {:>12.3}\n",
                c.qber,
                c.mode.label(),
                c.latency_ms,
                c.stages,
                st.f,
                st.f_fer,
                st.fer,
                st.rounds_mean,
                st.throughput_bps / 1e6
            ),
            (None, None) => s += &format!(
                "{:>7} {:>5} {:>8} {:>6}  served as reference\n",
                c.qber, c.mode.label(), c.latency_ms, c.stages
            ),
        }
    }
    s
}
