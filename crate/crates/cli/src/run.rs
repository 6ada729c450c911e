//! Run modes.

use std::error::Error;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use smpc_core::coordination::{mix_seed, AgentConfig, ControllerConfig, Coordinator, PredictionModel, PriorityMap};
use smpc_core::linmodel::DriverUncertaintyBounds;
use smpc_core::qp::QpSettings;
use smpc_core::sim::{dv_schedule_periodic, simulate, DriverMode, SimAgent, SimConfig, SimTrace, TruthDriver};
use smpc_core::stability::{
    certified_interval, sample_spectral_radii, scan_gains, search_gain, settling_fraction, Certification,
};

use crate::config::{GainSetting, ScenarioFile};
use crate::output::{fmt_sig9, write_controller_csv, write_json, write_trace_csv};
use crate::summary::{summarize, RunSummary};

pub type BoxResult<T> = Result<T, Box<dyn Error + Send + Sync>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Scenario MPC with the configured scenario count.
    Stochastic,
    /// Certainty-equivalent MPC on each agent's baseline realization.
    Baseline,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenarios: Option<usize>,
    pub horizon: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, file: &mut ScenarioFile) {
        if let Some(s) = self.seed {
            file.controller.seed = s;
        }
        if let Some(k) = self.scenarios {
            file.controller.scenarios = k;
            file.montecarlo.scenarios = k;
        }
        if let Some(n) = self.horizon {
            file.controller.horizon = n;
        }
    }
}

/// Feedback gain in use: the configured value or the midpoint of the
/// certified interval of the certification agent.
pub fn resolve_kv(file: &ScenarioFile) -> BoxResult<f64> {
    match file.controller.kv {
        GainSetting::Fixed(kv) => Ok(kv),
        GainSetting::Auto(_) => {
            let a = &file.agents[file.certify.agent];
            let iv = search_gain(&a.bounds, &a.vehicle.params(), file.controller.sample_time, &file.certify.search)?;
            Ok(iv.kv_recommended)
        }
    }
}

pub fn agent_configs(file: &ScenarioFile, variant: Variant, kv: f64) -> Vec<AgentConfig> {
    file.agents
        .iter()
        .map(|a| {
            let (bounds, prediction) = match variant {
                Variant::Stochastic => (a.bounds, PredictionModel::Sampled),
                Variant::Baseline => (
                    DriverUncertaintyBounds {
                        dv_min: 0.0,
                        dv_max: 0.0,
                        ..DriverUncertaintyBounds::point(a.baseline.kd, a.baseline.tau)
                    },
                    PredictionModel::Nominal {
                        kd: a.baseline.kd,
                        tau: a.baseline.tau,
                    },
                ),
            };
            AgentConfig {
                vehicle: a.vehicle.params(),
                bounds,
                prediction,
                limits: a.limits.limits(),
                weights: a.weights,
                kv,
            }
        })
        .collect()
}

pub fn controller_config(file: &ScenarioFile, variant: Variant) -> ControllerConfig {
    let c = &file.controller;
    ControllerConfig {
        sample_time: c.sample_time,
        horizon: c.horizon,
        scenarios: match variant {
            Variant::Stochastic => c.scenarios,
            Variant::Baseline => 1,
        },
        seed: c.seed,
        ccp: c.ccp,
        qp: QpSettings::active_set(),
        activation_distance: c.activation_distance,
        d_safe_margin: c.d_safe_margin,
    }
}

pub fn sim_config(file: &ScenarioFile) -> SimConfig {
    SimConfig {
        fine_step: file.sim.fine_step,
        duration: file.sim.duration,
        sample_time: file.controller.sample_time,
    }
}

/// Truth drivers with their stepwise speed-offset schedules.
pub fn sim_agents(file: &ScenarioFile) -> BoxResult<Vec<SimAgent>> {
    file.agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let dv = dv_schedule_periodic(
                a.truth.dv,
                file.sim.dv_amplitude,
                file.sim.dv_bound,
                file.sim.dv_period,
                file.sim.duration,
                mix_seed(file.sim.dv_seed, i, 0x5EED),
            )?;
            Ok(SimAgent {
                vehicle: a.vehicle.params(),
                driver: TruthDriver {
                    kd: a.truth.kd,
                    tau: a.truth.tau,
                    dv,
                    mode: file.sim.mode,
                },
                s0: a.s0,
                v0: a.v0,
            })
        })
        .collect()
}

pub struct SimulationRun {
    pub trace: SimTrace,
    pub summary: RunSummary,
    pub names: Vec<String>,
}

pub fn run_simulation(file: &ScenarioFile, variant: Variant) -> BoxResult<SimulationRun> {
    let kv = resolve_kv(file)?;
    let topology = file.topology()?;
    let agents = agent_configs(file, variant, kv);
    let initial: Vec<(f64, f64)> = file.agents.iter().map(|a| (a.s0, a.v0)).collect();
    let mut coord = Coordinator::new(
        agents,
        topology.clone(),
        PriorityMap::new(file.priorities.clone())?,
        controller_config(file, variant),
        &initial,
    )?;
    let trace = simulate(&sim_agents(file)?, &topology, &mut coord, &sim_config(file))?;
    let names = file.names();
    let summary = summarize(&trace, &topology, &names);
    Ok(SimulationRun { trace, summary, names })
}

pub fn write_simulation(run: &SimulationRun, out: &Path) -> BoxResult<()> {
    fs::create_dir_all(out)?;
    write_trace_csv(&out.join("trace.csv"), &run.trace, &run.names)?;
    write_controller_csv(&out.join("controller.csv"), &run.trace, &run.names)?;
    write_json(&out.join("summary.json"), &run.summary)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonSummary {
    pub stochastic: RunSummary,
    pub baseline: RunSummary,
    /// Pairs that collide under the baseline only.
    pub avoided_collisions: Vec<[String; 2]>,
}

pub fn compare(file: &ScenarioFile) -> BoxResult<(SimulationRun, SimulationRun, ComparisonSummary)> {
    let stochastic = run_simulation(file, Variant::Stochastic)?;
    let baseline = run_simulation(file, Variant::Baseline)?;
    let avoided = baseline
        .summary
        .collision_pairs
        .iter()
        .filter(|p| !stochastic.summary.collision_pairs.contains(p))
        .cloned()
        .collect();
    let summary = ComparisonSummary {
        stochastic: stochastic.summary.clone(),
        baseline: baseline.summary.clone(),
        avoided_collisions: avoided,
    };
    Ok((stochastic, baseline, summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct GainRow {
    pub kv: f64,
    pub certified: bool,
    pub spectral_radius: f64,
    pub kd: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyReport {
    pub kv_lo: f64,
    pub kv_hi: f64,
    pub kv_recommended: f64,
    pub kv_used: f64,
    /// Largest spectral radius among the scatter draws at `kv_used`.
    pub max_sampled_radius: f64,
    pub sampled_models: usize,
    pub all_sampled_stable: bool,
    /// Share of sampled prestabilized models settling within the horizon.
    pub settling_fraction: f64,
    pub settling_limit: f64,
    #[serde(skip)]
    pub grid: Vec<GainRow>,
    #[serde(skip)]
    pub radii: Vec<(f64, f64, f64)>,
}

pub fn certify(file: &ScenarioFile) -> BoxResult<CertifyReport> {
    let c = &file.certify;
    let a = &file.agents[c.agent];
    let p = a.vehicle.params();
    let ts = file.controller.sample_time;
    let scan = scan_gains(&a.bounds, &p, ts, &c.search)?;
    let iv = certified_interval(&scan)?;
    let grid = scan
        .iter()
        .map(|r| match r {
            Certification::Certified(s) => GainRow {
                kv: s.kv,
                certified: true,
                spectral_radius: s.worst_spectral_radius,
                kd: s.worst_theta.0,
                tau: s.worst_theta.1,
            },
            Certification::Failed(u) => GainRow {
                kv: u.kv,
                certified: false,
                spectral_radius: u.spectral_radius,
                kd: u.kd,
                tau: u.tau,
            },
        })
        .collect();
    let kv_used = match file.controller.kv {
        GainSetting::Fixed(kv) => kv,
        GainSetting::Auto(_) => iv.kv_recommended,
    };
    let radii = sample_spectral_radii(kv_used, &a.bounds, &p, ts, c.radius_samples, c.radius_seed)?;
    let max_r = radii.iter().map(|r| r.2).fold(0.0, f64::max);
    let limit = file.controller.horizon as f64 * ts;
    let settling = settling_fraction(kv_used, &a.bounds, &p, ts, c.settling_samples, c.radius_seed, c.settling_band, limit)?;
    Ok(CertifyReport {
        kv_lo: iv.kv_lo,
        kv_hi: iv.kv_hi,
        kv_recommended: iv.kv_recommended,
        kv_used,
        max_sampled_radius: max_r,
        sampled_models: radii.len(),
        all_sampled_stable: max_r < 1.0,
        settling_fraction: settling,
        settling_limit: limit,
        grid,
        radii,
    })
}

pub fn write_certify(report: &CertifyReport, out: &Path) -> BoxResult<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("certify.csv"))?;
    w.write_record(["kv", "certified", "spectral_radius", "kd", "tau"])?;
    for r in &report.grid {
        w.write_record([
            fmt_sig9(r.kv),
            (r.certified as u8).to_string(),
            fmt_sig9(r.spectral_radius),
            fmt_sig9(r.kd),
            fmt_sig9(r.tau),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("radii.csv"))?;
    w.write_record(["kd", "tau", "spectral_radius"])?;
    for &(kd, tau, r) in &report.radii {
        w.write_record([fmt_sig9(kd), fmt_sig9(tau), fmt_sig9(r)])?;
    }
    w.flush()?;
    write_json(&out.join("summary.json"), report)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationRow {
    pub run: usize,
    pub k: usize,
    pub t: f64,
    pub v: f64,
    pub a: f64,
    pub kd: f64,
    pub tau: f64,
    pub speed: bool,
    pub accel: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarloReport {
    pub runs: usize,
    pub scenarios: usize,
    pub checked_steps: usize,
    pub violations: usize,
    pub rate: f64,
    /// `1 / (1 + K)`.
    pub bound: f64,
    /// Half-width of the two-sided 95% binomial interval at the bound.
    pub margin: f64,
    pub within_bound: bool,
    #[serde(skip)]
    pub rows: Vec<ViolationRow>,
}

/// Repeated single-agent runs with truth drivers drawn from the uncertainty
/// box. The true state one controller step after every decision is checked
/// against the state constraints.
pub fn montecarlo(file: &ScenarioFile) -> BoxResult<MonteCarloReport> {
    let mc = &file.montecarlo;
    if file.agents.len() != 1 {
        return Err("montecarlo mode expects a single-agent scenario file".into());
    }
    let kv = resolve_kv(file)?;
    let topology = file.topology()?;
    let a = &file.agents[0];
    let b = a.bounds;
    let ts = file.controller.sample_time;
    let mut ccfg = controller_config(file, Variant::Stochastic);
    ccfg.scenarios = mc.scenarios;
    let sim = SimConfig {
        duration: mc.duration,
        ..sim_config(file)
    };
    let spc = (ts / sim.fine_step).round() as usize;
    let limits = a.limits.limits();

    let per_run: Vec<BoxResult<(usize, Vec<ViolationRow>)>> = (0..mc.runs)
        .into_par_iter()
        .map(|run| {
            let seed = mix_seed(file.controller.seed, run, 0x3C3C);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kd = b.kd_min + (b.kd_max - b.kd_min) * rng.random::<f64>();
            let tau = b.tau_min + (b.tau_max - b.tau_min) * rng.random::<f64>();
            let half = 0.5 * (b.dv_max - b.dv_min);
            let dv = dv_schedule_periodic(0.5 * (b.dv_min + b.dv_max), half, half, ts, mc.duration, rng.random())?;
            let truth = SimAgent {
                vehicle: a.vehicle.params(),
                driver: TruthDriver {
                    kd,
                    tau,
                    dv,
                    mode: DriverMode::Digital,
                },
                s0: a.s0,
                v0: a.v0,
            };
            let mut c = ccfg.clone();
            c.seed = seed;
            let mut coord = Coordinator::new(
                agent_configs(file, Variant::Stochastic, kv),
                topology.clone(),
                PriorityMap::new(file.priorities.clone())?,
                c,
                &[(a.s0, a.v0)],
            )?;
            let trace = simulate(&[truth], &topology, &mut coord, &sim)?;
            let steps = trace.controller.len();
            let mut rows = Vec::new();
            for k in 0..steps {
                let Some(r) = trace.rows.get((k + 1) * spc) else { break };
                let speed = r.v > limits.v_upper + 1e-9 || r.v < -1e-9;
                let accel = r.a > limits.a_max + 1e-9 || r.a < limits.a_min - 1e-9;
                if speed || accel {
                    rows.push(ViolationRow {
                        run,
                        k,
                        t: r.t,
                        v: r.v,
                        a: r.a,
                        kd,
                        tau,
                        speed,
                        accel,
                    });
                }
            }
            Ok((steps, rows))
        })
        .collect();

    let mut checked = 0;
    let mut rows = Vec::new();
    for r in per_run {
        let (n, v) = r?;
        checked += n;
        rows.extend(v);
    }
    let bound = 1.0 / (1.0 + mc.scenarios as f64);
    let margin = 1.96 * (bound * (1.0 - bound) / checked.max(1) as f64).sqrt();
    let rate = rows.len() as f64 / checked.max(1) as f64;
    Ok(MonteCarloReport {
        runs: mc.runs,
        scenarios: mc.scenarios,
        checked_steps: checked,
        violations: rows.len(),
        rate,
        bound,
        margin,
        within_bound: rate <= bound + margin,
        rows,
    })
}

pub fn write_montecarlo(report: &MonteCarloReport, out: &Path) -> BoxResult<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("violations.csv"))?;
    w.write_record(["run", "k", "t", "v", "a", "kd", "tau", "speed", "accel"])?;
    for r in &report.rows {
        w.write_record([
            r.run.to_string(),
            r.k.to_string(),
            fmt_sig9(r.t),
            fmt_sig9(r.v),
            fmt_sig9(r.a),
            fmt_sig9(r.kd),
            fmt_sig9(r.tau),
            (r.speed as u8).to_string(),
            (r.accel as u8).to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&out.join("summary.json"), report)?;
    Ok(())
}
