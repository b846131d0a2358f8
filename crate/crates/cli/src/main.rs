//! `rdp`: command-line front end for the rate-distortion-perception solvers.

mod instance;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use rdp_core::drp::{solve_drp, DrpProblem};
use rdp_core::pgm::{load_pgm, save_pgm};
use rdp_core::prob::{self, CostMatrix, Distribution};
use rdp_core::rdh::{prediction_errors, simulate_marking, solve_rdh_rdp, symbol_squared_error, SYMBOLS};
use rdp_core::rdp::{solve_rdp, PerceptionKind, RdpProblem, SolverConfig};
use rdp_core::transitions::{
    detect_transition_point, drp_cross_section, transition_curve_via_rd, upper_bound_h, CurveSample,
    SampleMeta, TransitionPoint,
};
use serde_json::{json, Value};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "rdp", version, about = "Rate-distortion-perception functions on finite alphabets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimum rate under distortion and perception budgets.
    SolveRdp {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long = "D")]
        d: f64,
        #[arg(long = "P")]
        p: f64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Rate over a D x P grid, as CSV.
    Sweep {
        #[command(flatten)]
        inst: InstanceArgs,
        /// start:stop:count
        #[arg(long = "D-grid")]
        d_grid: String,
        /// start:stop:count
        #[arg(long = "P-grid")]
        p_grid: String,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Transition curves f and h, or the transition point of a cross-section.
    Transition {
        #[arg(long, value_enum)]
        mode: TransitionMode,
        #[command(flatten)]
        inst: InstanceArgs,
        /// start:stop:count (mode f); defaults to 50 points on [0, D_inf].
        #[arg(long = "D-grid")]
        d_grid: Option<String>,
        /// start:stop:count (modes h and detect); defaults to 50 points on [0, D_inf].
        #[arg(long = "P-grid")]
        p_grid: Option<String>,
        /// Rate of the cross-section in mode detect.
        #[arg(long = "R")]
        r: Option<f64>,
        /// CSV with `P` and `D` columns to run detection on instead of solving.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        slope_tol: f64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Minimum distortion under rate and perception budgets.
    SolveDrp {
        #[command(flatten)]
        inst: InstanceArgs,
        #[arg(long = "R")]
        r: f64,
        #[arg(long = "P")]
        p: f64,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Marked-signal law and simulated marking for a grayscale image.
    Rdh {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "D")]
        d: f64,
        #[arg(long = "P")]
        p: f64,
        /// Cost on the 256 prediction-error symbols, used for both budgets.
        #[arg(long, value_enum, default_value_t = SymbolCost::Mse)]
        cost: SymbolCost,
        /// Seed for the marking simulation; PSNR is only reported when given.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        emit_marked: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
}

#[derive(Args)]
struct InstanceArgs {
    /// binary:p=<f> | gaussian:mu=<f>,sigma=<f>,S=<f>,delta=<f> | file=<path>
    #[arg(long)]
    source: Option<String>,
    /// hamming | mse | file=<path>
    #[arg(long, default_value = "hamming")]
    distortion: String,
    #[arg(long, value_enum, default_value_t = Perception::W2)]
    perception: Perception,
    /// Transport cost of the w2 perception; defaults to the distortion cost.
    #[arg(long)]
    perception_cost: Option<String>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 0.01)]
    eps: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    /// Coupling-block passes per iteration.
    #[arg(long, default_value_t = 1)]
    pi_sweeps: usize,
    /// Geometric relaxation exponent for the output marginal.
    #[arg(long, default_value_t = 1.0)]
    r_relaxation: f64,
    /// Add rates in bits next to the nats fields.
    #[arg(long)]
    bits: bool,
    /// Machine-readable output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Perception {
    W2,
    Tv,
    Kl,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransitionMode {
    F,
    H,
    Detect,
}

#[derive(Clone, Copy, ValueEnum)]
enum SymbolCost {
    Mse,
    Hamming,
}

impl Perception {
    fn kind(self) -> PerceptionKind {
        match self {
            Perception::W2 => PerceptionKind::Wasserstein,
            Perception::Tv => PerceptionKind::Tv,
            Perception::Kl => PerceptionKind::Kl,
        }
    }
}

impl SolverArgs {
    fn config(&self) -> Result<SolverConfig> {
        let cfg = SolverConfig {
            max_iter: self.max_iter,
            residual_tol: self.tol,
            pi_sweeps: self.pi_sweeps,
            r_relaxation: self.r_relaxation,
            ..SolverConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit(&self, text: &str, summary: &str) -> Result<()> {
        match &self.out {
            Some(path) => {
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
                println!("{summary}");
            }
            None => print!("{text}"),
        }
        Ok(())
    }
}

struct Instance {
    p: Distribution,
    d: CostMatrix,
    /// Transport cost for w2, Hamming for tv, absent for kl.
    c: Option<CostMatrix>,
    kind: PerceptionKind,
}

impl InstanceArgs {
    fn load(&self) -> Result<Instance> {
        let source = self.source.as_deref().ok_or_else(|| anyhow!("--source is required"))?;
        let p = instance::parse_source(source)?;
        let d = instance::parse_cost(&self.distortion, &p)?;
        let c = match self.perception {
            Perception::W2 => Some(match &self.perception_cost {
                Some(spec) => instance::parse_cost(spec, &p)?,
                None => d.clone(),
            }),
            Perception::Tv => Some(prob::hamming_matrix(p.len(), d.cols())),
            Perception::Kl => None,
        };
        Ok(Instance {
            p,
            d,
            c,
            kind: self.perception.kind(),
        })
    }
}

impl Instance {
    fn rdp(&self, d: f64, p: f64, eps: f64) -> Result<RdpProblem> {
        let c = match self.kind {
            PerceptionKind::Wasserstein => self.c.clone(),
            _ => None,
        };
        Ok(RdpProblem::new(self.p.clone(), self.d.clone(), c, d, p, eps)?)
    }

    fn transport_cost(&self) -> Result<&CostMatrix> {
        self.c
            .as_ref()
            .ok_or_else(|| anyhow!("this command needs a transport perception (w2 or tv)"))
    }

    /// `min_j sum_i p_i d_ij`.
    fn d_inf(&self) -> f64 {
        let pv = self.p.probs();
        let de = self.d.entries();
        (0..self.d.cols())
            .map(|j| (0..pv.len()).map(|i| pv[i] * de[[i, j]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }
}

fn with_bits(obj: &mut Value, bits: bool, fields: &[&str]) {
    if !bits {
        return;
    }
    let map = obj.as_object_mut().expect("object");
    for f in fields {
        if let Some(v) = map.get(*f).and_then(Value::as_f64) {
            map.insert(format!("{f}_bits"), json!(v / std::f64::consts::LN_2));
        }
    }
}

fn csv_num(x: f64) -> String {
    format!("{x}")
}

fn check_converged(converged: bool, residual: f64, iterations: usize) -> Result<()> {
    if converged {
        Ok(())
    } else {
        Err(rdp_core::Error::NonConvergence {
            residual,
            iterations,
        }
        .into())
    }
}

fn cmd_solve_rdp(inst: &InstanceArgs, d: f64, p: f64, solver: &SolverArgs) -> Result<()> {
    let cfg = solver.config()?;
    let instance = inst.load()?;
    let res = solve_rdp(&instance.rdp(d, p, solver.eps)?, instance.kind, &cfg)?;
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "solve-rdp",
        "D": d,
        "P": p,
        "rate": res.rate,
        "achieved_D": res.achieved_distortion,
        "achieved_P": res.achieved_perception,
        "iterations": res.iterations,
        "converged": res.converged,
        "residual": res.final_residual(),
    });
    with_bits(&mut out, solver.bits, &["rate"]);
    solver.emit(
        &format!("{}\n", serde_json::to_string_pretty(&out)?),
        &format!("rate {} nats after {} iterations", res.rate, res.iterations),
    )?;
    check_converged(res.converged, res.final_residual(), res.iterations)
}

fn cmd_sweep(inst: &InstanceArgs, d_grid: &str, p_grid: &str, solver: &SolverArgs) -> Result<()> {
    let cfg = solver.config()?;
    let instance = inst.load()?;
    let ds = instance::parse_grid(d_grid)?;
    let ps = instance::parse_grid(p_grid)?;
    let points: Vec<(f64, f64)> = ds.iter().flat_map(|&d| ps.iter().map(move |&p| (d, p))).collect();
    let rows: Vec<String> = points
        .par_iter()
        .map(|&(d, p)| {
            let solved = instance
                .rdp(d, p, solver.eps)
                .and_then(|prob| Ok(solve_rdp(&prob, instance.kind, &cfg)?));
            let (rate, ad, ap, conv) = match solved {
                Ok(r) => (r.rate, r.achieved_distortion, r.achieved_perception, r.converged),
                Err(_) => (f64::NAN, f64::NAN, f64::NAN, false),
            };
            let mut row = vec![csv_num(d), csv_num(p), csv_num(rate)];
            if solver.bits {
                row.push(csv_num(rate / std::f64::consts::LN_2));
            }
            row.extend([csv_num(ad), csv_num(ap), conv.to_string()]);
            row.join(",")
        })
        .collect();
    let header = if solver.bits {
        "D,P,rate,rate_bits,achieved_D,achieved_P,converged"
    } else {
        "D,P,rate,achieved_D,achieved_P,converged"
    };
    let mut text = format!("# schema_version={SCHEMA_VERSION}\n{header}\n");
    for r in &rows {
        text.push_str(r);
        text.push('\n');
    }
    let failed = rows.iter().filter(|r| r.ends_with("false")).count();
    solver.emit(&text, &format!("{} grid points, {failed} not converged", rows.len()))
}

fn default_grid(end: f64) -> Vec<f64> {
    (0..50).map(|i| end * i as f64 / 49.0).collect()
}

fn points_csv(points: &[TransitionPoint]) -> String {
    let mut text = format!("# schema_version={SCHEMA_VERSION}\nD,P,rate\n");
    for t in points {
        text.push_str(&format!("{},{},{}\n", csv_num(t.d), csv_num(t.p), csv_num(t.rate)));
    }
    text
}

/// Samples from a CSV with `P` and `D` columns; `#` lines are skipped.
fn read_samples(path: &PathBuf) -> Result<Vec<CurveSample>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| anyhow!("empty samples file"))?
        .split(',')
        .map(str::trim)
        .collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| anyhow!("samples file has no '{name}' column"))
    };
    let (ip, id) = (col("P")?, col("D")?);
    let ir = header.iter().position(|h| *h == "rate");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            let get = |k: usize| -> Result<f64> {
                f.get(k)
                    .ok_or_else(|| anyhow!("short row '{l}'"))?
                    .parse::<f64>()
                    .with_context(|| format!("bad number in row '{l}'"))
            };
            Ok(CurveSample {
                abscissa: get(ip)?,
                ordinate: get(id)?,
                meta: SampleMeta {
                    rate: ir.map(get).transpose()?.unwrap_or(f64::NAN),
                    converged: true,
                    ..SampleMeta::default()
                },
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_transition(
    mode: TransitionMode,
    inst: &InstanceArgs,
    d_grid: Option<&str>,
    p_grid: Option<&str>,
    rate: Option<f64>,
    samples: Option<&PathBuf>,
    slope_tol: f64,
    solver: &SolverArgs,
) -> Result<()> {
    let cfg = solver.config()?;
    match mode {
        TransitionMode::F => {
            let instance = inst.load()?;
            let grid = match d_grid {
                Some(g) => instance::parse_grid(g)?,
                None => default_grid(instance.d_inf()),
            };
            let pts = transition_curve_via_rd(
                &instance.p,
                &instance.d,
                instance.c.as_ref(),
                instance.kind,
                &grid,
                &cfg,
            )?;
            solver.emit(&points_csv(&pts), &format!("{} samples of f", pts.len()))
        }
        TransitionMode::H => {
            let instance = inst.load()?;
            let grid = match p_grid {
                Some(g) => instance::parse_grid(g)?,
                None => default_grid(instance.d_inf()),
            };
            let pts = upper_bound_h(&instance.p, &instance.d, instance.transport_cost()?, &grid)?;
            solver.emit(&points_csv(&pts), &format!("{} samples of h", pts.len()))
        }
        TransitionMode::Detect => {
            let samples = match samples {
                Some(path) => read_samples(path)?,
                None => {
                    let instance = inst.load()?;
                    let r = rate.ok_or_else(|| anyhow!("mode detect needs --R or --samples"))?;
                    let grid = match p_grid {
                        Some(g) => instance::parse_grid(g)?,
                        None => default_grid(instance.d_inf()),
                    };
                    let template = DrpProblem::new(
                        instance.p.clone(),
                        instance.d.clone(),
                        instance.transport_cost()?.clone(),
                        r,
                        0.0,
                        solver.eps,
                    )?;
                    drp_cross_section(&template, &grid, &cfg)?
                }
            };
            let mut text = format!("# schema_version={SCHEMA_VERSION}\nP,D,rate,converged\n");
            for s in &samples {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    csv_num(s.abscissa),
                    csv_num(s.ordinate),
                    csv_num(s.meta.rate),
                    s.meta.converged
                ));
            }
            let found = detect_transition_point(&samples, slope_tol);
            if let Ok(t) = &found {
                let mut v = serde_json::to_value(t)?;
                v.as_object_mut()
                    .expect("object")
                    .insert("schema_version".into(), json!(SCHEMA_VERSION));
                text.push_str(&serde_json::to_string(&v)?);
                text.push('\n');
            }
            solver.emit(&text, &format!("{} samples", samples.len()))?;
            found.map(|t| {
                eprintln!("transition at P = {}, D = {}", t.p, t.d);
            })?;
            Ok(())
        }
    }
}

fn cmd_solve_drp(inst: &InstanceArgs, r: f64, p: f64, solver: &SolverArgs) -> Result<()> {
    let cfg = solver.config()?;
    let instance = inst.load()?;
    if matches!(instance.kind, PerceptionKind::Kl) {
        bail!("solve-drp supports w2 and tv perception only");
    }
    let prob = DrpProblem::new(
        instance.p.clone(),
        instance.d.clone(),
        instance.transport_cost()?.clone(),
        r,
        p,
        solver.eps,
    )?;
    let res = solve_drp(&prob, &cfg)?;
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "solve-drp",
        "R": r,
        "P": p,
        "distortion": res.achieved_distortion,
        "achieved_R": res.rate,
        "achieved_P": res.achieved_perception,
        "iterations": res.iterations,
        "converged": res.converged,
        "residual": res.final_residual(),
    });
    with_bits(&mut out, solver.bits, &["achieved_R"]);
    solver.emit(
        &format!("{}\n", serde_json::to_string_pretty(&out)?),
        &format!("distortion {} after {} iterations", res.achieved_distortion, res.iterations),
    )?;
    check_converged(res.converged, res.final_residual(), res.iterations)
}

#[allow(clippy::too_many_arguments)]
fn cmd_rdh(
    image: &PathBuf,
    d: f64,
    p: f64,
    cost: SymbolCost,
    seed: Option<u64>,
    emit_marked: Option<&PathBuf>,
    solver: &SolverArgs,
) -> Result<()> {
    let cfg = solver.config()?;
    let img = load_pgm(image).with_context(|| format!("reading {}", image.display()))?;
    if emit_marked.is_some() && seed.is_none() {
        return Err(rdp_core::Error::SeedRequired.into());
    }
    let pe = prediction_errors(&img)?;
    let c = match cost {
        SymbolCost::Mse => symbol_squared_error(),
        SymbolCost::Hamming => prob::hamming_matrix(SYMBOLS, SYMBOLS),
    };
    let sol = solve_rdh_rdp(&pe.histogram, &c, &c, d, p, solver.eps, &cfg)?;
    let psnr = match seed {
        Some(s) => {
            let m = simulate_marking(&img, &sol, Some(s))?;
            if let Some(path) = emit_marked {
                save_pgm(&m.image, path).with_context(|| format!("writing {}", path.display()))?;
            }
            if m.psnr.is_infinite() {
                json!("inf")
            } else {
                json!(m.psnr)
            }
        }
        None => Value::Null,
    };
    let out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "rdh",
        "D": d,
        "P": p,
        "embedding_rate_nats": sol.embedding_rate,
        "embedding_rate_bits": sol.embedding_rate / std::f64::consts::LN_2,
        "achieved_D": sol.achieved_d,
        "achieved_P": sol.achieved_p,
        "certified_D": sol.certified_d,
        "certified_P": sol.certified_p,
        "psnr": psnr,
        "iterations": sol.iterations,
        "converged": sol.converged,
        "residual": sol.final_residual(),
    });
    solver.emit(
        &format!("{}\n", serde_json::to_string_pretty(&out)?),
        &format!("embedding rate {} nats", sol.embedding_rate),
    )?;
    check_converged(sol.converged, sol.final_residual(), sol.iterations)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SolveRdp { inst, d, p, solver } => cmd_solve_rdp(inst, *d, *p, solver),
        Command::Sweep {
            inst,
            d_grid,
            p_grid,
            solver,
        } => cmd_sweep(inst, d_grid, p_grid, solver),
        Command::Transition {
            mode,
            inst,
            d_grid,
            p_grid,
            r,
            samples,
            slope_tol,
            solver,
        } => cmd_transition(
            *mode,
            inst,
            d_grid.as_deref(),
            p_grid.as_deref(),
            *r,
            samples.as_ref(),
            *slope_tol,
            solver,
        ),
        Command::SolveDrp { inst, r, p, solver } => cmd_solve_drp(inst, *r, *p, solver),
        Command::Rdh {
            image,
            d,
            p,
            cost,
            seed,
            emit_marked,
            solver,
        } => cmd_rdh(image, *d, *p, *cost, *seed, emit_marked.as_ref(), solver),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<rdp_core::Error>() {
        Some(rdp_core::Error::NonConvergence { .. }) => 2,
        Some(rdp_core::Error::NoTransitionFound) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
