//! Scalar metrics of a simulation trace.

use serde::Serialize;
use smpc_core::coordination::{pairwise_distance, ConflictTopology};
use smpc_core::sim::SimTrace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentSummary {
    pub name: String,
    pub min_v: f64,
    pub max_v: f64,
    pub max_abs_accel: f64,
    /// Largest deceleration as a positive number, m/s^2.
    pub max_decel: f64,
    pub max_accel: f64,
    /// First time the agent reaches the middle of its collision points.
    pub crossing_time: Option<f64>,
    pub max_advice: f64,
    pub min_advice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub agents: [String; 2],
    pub min_distance: f64,
    pub collided: bool,
    pub first_collision_time: Option<f64>,
    pub positions_at_collision: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub agents: Vec<AgentSummary>,
    pub pairs: Vec<PairSummary>,
    pub collision_count: usize,
    pub collision_pairs: Vec<[String; 2]>,
    pub crossing_order: Vec<String>,
    pub controller_steps: usize,
    pub soft_infeasible_steps: usize,
    pub fallback_steps: usize,
    pub max_ccp_iterations: usize,
}

fn crossing_point(topology: &ConflictTopology, i: usize) -> Option<f64> {
    let pts: Vec<f64> = (0..topology.agents())
        .filter(|&l| topology.conflicts(i, l))
        .map(|l| topology.s_c(i, l))
        .collect();
    (!pts.is_empty()).then(|| pts.iter().sum::<f64>() / pts.len() as f64)
}

pub fn summarize(trace: &SimTrace, topology: &ConflictTopology, names: &[String]) -> RunSummary {
    let m = trace.agents;
    let mut agents = Vec::with_capacity(m);
    for i in 0..m {
        let mid = crossing_point(topology, i);
        let mut s = AgentSummary {
            name: names[i].clone(),
            min_v: f64::INFINITY,
            max_v: f64::NEG_INFINITY,
            max_abs_accel: 0.0,
            max_decel: 0.0,
            max_accel: 0.0,
            crossing_time: None,
            max_advice: f64::NEG_INFINITY,
            min_advice: f64::INFINITY,
        };
        for r in trace.agent_rows(i) {
            s.min_v = s.min_v.min(r.v);
            s.max_v = s.max_v.max(r.v);
            s.max_abs_accel = s.max_abs_accel.max(r.a.abs());
            s.max_decel = s.max_decel.max(-r.a);
            s.max_accel = s.max_accel.max(r.a);
            if s.crossing_time.is_none() && mid.is_some_and(|c| r.s >= c) {
                s.crossing_time = Some(r.t);
            }
        }
        for c in trace.controller.iter().filter(|c| c.agent == i) {
            s.max_advice = s.max_advice.max(c.advice);
            s.min_advice = s.min_advice.min(c.advice);
        }
        agents.push(s);
    }

    let mut pairs = Vec::new();
    for i in 0..m {
        for l in i + 1..m {
            if !topology.conflicts(i, l) {
                continue;
            }
            let si: Vec<f64> = trace.agent_rows(i).map(|r| r.s).collect();
            let sl: Vec<f64> = trace.agent_rows(l).map(|r| r.s).collect();
            let min_distance = si
                .iter()
                .zip(&sl)
                .map(|(&a, &b)| pairwise_distance(a, topology.s_c(i, l), b, topology.s_c(l, i)))
                .fold(f64::INFINITY, f64::min);
            let hit = trace.collisions.iter().find(|c| c.i == i && c.l == l);
            pairs.push(PairSummary {
                agents: [names[i].clone(), names[l].clone()],
                min_distance,
                collided: hit.is_some(),
                first_collision_time: hit.map(|c| c.t),
                positions_at_collision: hit.map(|c| [c.s_i, c.s_l]),
            });
        }
    }

    let mut order: Vec<(f64, usize)> = agents
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.crossing_time.map(|t| (t, i)))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let diags = trace.controller.iter().filter_map(|c| c.diagnostics.as_ref());
    let (mut soft, mut fallback, mut iters) = (0, 0, 0);
    for d in diags {
        fallback += d.fallback as usize;
        if let Some(o) = &d.ocp {
            soft += o.soft_infeasible as usize;
            iters = iters.max(o.ccp_iterations);
        }
    }

    let collision_pairs: Vec<[String; 2]> = pairs.iter().filter(|p| p.collided).map(|p| p.agents.clone()).collect();
    RunSummary {
        agents,
        collision_count: collision_pairs.len(),
        collision_pairs,
        pairs,
        crossing_order: order.into_iter().map(|(_, i)| names[i].clone()).collect(),
        controller_steps: trace.controller.iter().map(|c| c.k + 1).max().unwrap_or(0),
        soft_infeasible_steps: soft,
        fallback_steps: fallback,
        max_ccp_iterations: iters,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use smpc_core::linmodel::VehicleParams;
    use smpc_core::sim::{simulate, DriverMode, DvSchedule, OpenLoop, SimAgent, SimConfig, TruthDriver};

    #[test]
    fn stationary_single_agent() {
        let topo = ConflictTopology::new(vec![vec![f64::INFINITY]]).unwrap();
        let agent = SimAgent {
            vehicle: VehicleParams::new(4.87, 1.85, 0.3).unwrap(),
            driver: TruthDriver {
                kd: 0.8,
                tau: 1.0,
                dv: DvSchedule::constant(0.0),
                mode: DriverMode::ContinuousDelay,
            },
            s0: 3.0,
            v0: 0.0,
        };
        let mut ctl = OpenLoop(|_k: usize, _m: &[smpc_core::coordination::AgentMeasurement<'_>]| vec![0.0]);
        let cfg = SimConfig {
            duration: 3.0,
            ..Default::default()
        };
        let tr = simulate(&[agent], &topo, &mut ctl, &cfg).unwrap();
        let s = summarize(&tr, &topo, &["1".to_string()]);
        assert_eq!(s.agents[0].min_v, 0.0);
        assert_eq!(s.agents[0].max_v, 0.0);
        assert!(s.agents[0].crossing_time.is_none());
        assert!(s.crossing_order.is_empty() && s.pairs.is_empty());
        assert_eq!(s.collision_count, 0);
    }
}
