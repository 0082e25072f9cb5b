//! Built-in deterministic pixel-control environments: a pendulum swing-up
//! and a point-mass reacher, both rendered as 40x40 grayscale images.
//!
//! Episodes are exactly 200 steps. All dynamics are integrated with
//! semi-implicit Euler at dt = 0.05 and are bit-deterministic given the
//! reset seed and action sequence.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const OBS_SIDE: usize = 40;
pub const OBS_PIXELS: usize = OBS_SIDE * OBS_SIDE;
pub const EPISODE_LEN: usize = 200;
pub const DT: f64 = 0.05;

/// 40x40 grayscale image, row-major, values in [0, 1].
pub type Observation = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PixelPendulum,
    PixelPointMass,
}

pub const ENV_NAMES: [&str; 2] = ["pixel-pendulum", "pixel-pointmass"];

impl EnvKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pixel-pendulum" => Ok(EnvKind::PixelPendulum),
            "pixel-pointmass" => Ok(EnvKind::PixelPointMass),
            other => Err(Error::contract(format!(
                "unknown environment '{}'; available: {}",
                other,
                ENV_NAMES.join(", ")
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvKind::PixelPendulum => "pixel-pendulum",
            EnvKind::PixelPointMass => "pixel-pointmass",
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvKind::PixelPendulum => 1,
            EnvKind::PixelPointMass => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phys {
    Pendulum { theta: f64, omega: f64 },
    PointMass { px: f64, py: f64, vx: f64, vy: f64 },
}

/// Environment state: physical coordinates plus the step counter and the
/// seed the episode was reset with.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    kind: EnvKind,
    phys: Phys,
    step: usize,
    seed: u64,
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_done(&self) -> bool {
        self.step >= EPISODE_LEN
    }

    /// Direct pendulum state, for physics and rendering tests.
    pub fn pendulum(theta: f64, omega: f64) -> Self {
        EnvState {
            kind: EnvKind::PixelPendulum,
            phys: Phys::Pendulum { theta, omega },
            step: 0,
            seed: 0,
        }
    }

    /// Direct point-mass state, for physics and rendering tests.
    pub fn point_mass(px: f64, py: f64, vx: f64, vy: f64) -> Self {
        EnvState {
            kind: EnvKind::PixelPointMass,
            phys: Phys::PointMass { px, py, vx, vy },
            step: 0,
            seed: 0,
        }
    }

    /// Pendulum coordinates (theta, omega); panics on the wrong kind.
    pub fn pendulum_coords(&self) -> (f64, f64) {
        match self.phys {
            Phys::Pendulum { theta, omega } => (theta, omega),
            _ => panic!("not a pendulum state"),
        }
    }

    /// Point-mass coordinates (px, py, vx, vy); panics on the wrong kind.
    pub fn point_mass_coords(&self) -> (f64, f64, f64, f64) {
        match self.phys {
            Phys::PointMass { px, py, vx, vy } => (px, py, vx, vy),
            _ => panic!("not a point-mass state"),
        }
    }
}

/// Deterministic initial state and rendered observation for a seed.
/// Pendulum: theta ~ U(-pi, pi), omega ~ U(-1, 1).
/// Point-mass: position uniform in the unit box, velocity zero.
pub fn env_reset(kind: EnvKind, seed: u64) -> (EnvState, Observation) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let phys = match kind {
        EnvKind::PixelPendulum => {
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let omega = rng.gen_range(-1.0..1.0);
            Phys::Pendulum { theta, omega }
        }
        EnvKind::PixelPointMass => {
            let px = rng.gen_range(-1.0..1.0);
            let py = rng.gen_range(-1.0..1.0);
            Phys::PointMass {
                px,
                py,
                vx: 0.0,
                vy: 0.0,
            }
        }
    };
    let state = EnvState {
        kind,
        phys,
        step: 0,
        seed,
    };
    let obs = render_state(&state);
    (state, obs)
}

const PENDULUM_GRAVITY: f64 = 10.0;
const PENDULUM_LENGTH: f64 = 1.0;
const PENDULUM_MASS: f64 = 1.0;
const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const POINT_MASS_GOAL: (f64, f64) = (0.5, 0.5);

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    v.max(lo).min(hi)
}

/// One environment transition. Actions are clamped to [-1, 1] per
/// coordinate on entry. Stepping a finished episode is a contract failure.
pub fn env_step(state: &EnvState, action: &[f64]) -> Result<(EnvState, Observation, f64, bool)> {
    if state.is_done() {
        return Err(Error::contract("env_step: episode already done"));
    }
    if action.len() != state.kind.action_dim() {
        return Err(Error::contract(format!(
            "env_step: action dim {} for {}, want {}",
            action.len(),
            state.kind.name(),
            state.kind.action_dim()
        )));
    }
    let (phys, reward) = match state.phys {
        Phys::Pendulum { theta, omega } => {
            let u = clamp(action[0], -1.0, 1.0);
            let accel = -3.0 * PENDULUM_GRAVITY / (2.0 * PENDULUM_LENGTH)
                * (theta + std::f64::consts::PI).sin()
                + 3.0 * u * PENDULUM_MAX_TORQUE / (PENDULUM_MASS * PENDULUM_LENGTH * PENDULUM_LENGTH);
            let omega = clamp(omega + accel * DT, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
            let theta = theta + omega * DT;
            (Phys::Pendulum { theta, omega }, theta.cos())
        }
        Phys::PointMass { px, py, vx, vy } => {
            let ux = clamp(action[0], -1.0, 1.0);
            let uy = clamp(action[1], -1.0, 1.0);
            let vx = 0.9 * vx + 0.1 * ux;
            let vy = 0.9 * vy + 0.1 * uy;
            let px = clamp(px + vx * DT, -1.0, 1.0);
            let py = clamp(py + vy * DT, -1.0, 1.0);
            let dist =
                ((px - POINT_MASS_GOAL.0).powi(2) + (py - POINT_MASS_GOAL.1).powi(2)).sqrt();
            let reward = 1.0 - dist / 8.0_f64.sqrt();
            (Phys::PointMass { px, py, vx, vy }, reward)
        }
    };
    let next = EnvState {
        kind: state.kind,
        phys,
        step: state.step + 1,
        seed: state.seed,
    };
    let done = next.is_done();
    let obs = render_state(&next);
    Ok((next, obs, reward, done))
}

/// Integer-deterministic rasterization, no anti-aliasing: background 0.0;
/// pendulum rod 1.0 (2 pixels wide, drawn from image center); point-mass
/// goal 0.5 and agent 1.0 as 3x3 squares.
pub fn render_state(state: &EnvState) -> Observation {
    let mut img = vec![0.0; OBS_PIXELS];
    match state.phys {
        Phys::Pendulum { theta, .. } => {
            let (cx, cy) = (19.5, 19.5);
            let rod_len = 16.0;
            let samples = 64;
            for s in 0..=samples {
                let t = rod_len * s as f64 / samples as f64;
                let px = cx + t * theta.sin();
                let py = cy - t * theta.cos();
                let col0 = (px - 0.5).floor() as i64;
                let row0 = (py - 0.5).floor() as i64;
                for dr in 0..2 {
                    for dc in 0..2 {
                        let (r, c) = (row0 + dr, col0 + dc);
                        if (0..OBS_SIDE as i64).contains(&r) && (0..OBS_SIDE as i64).contains(&c) {
                            img[r as usize * OBS_SIDE + c as usize] = 1.0;
                        }
                    }
                }
            }
        }
        Phys::PointMass { px, py, .. } => {
            let to_col = |x: f64| ((x + 1.0) / 2.0 * (OBS_SIDE - 1) as f64).round() as i64;
            let to_row = |y: f64| ((1.0 - y) / 2.0 * (OBS_SIDE - 1) as f64).round() as i64;
            let mut blot = |row: i64, col: i64, value: f64, img: &mut Vec<f64>| {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (r, c) = (row + dr, col + dc);
                        if (0..OBS_SIDE as i64).contains(&r) && (0..OBS_SIDE as i64).contains(&c) {
                            img[r as usize * OBS_SIDE + c as usize] = value;
                        }
                    }
                }
            };
            blot(to_row(POINT_MASS_GOAL.1), to_col(POINT_MASS_GOAL.0), 0.5, &mut img);
            blot(to_row(py), to_col(px), 1.0, &mut img);
        }
    }
    img
}

/// Mean undiscounted return of a uniform random policy, deterministic given
/// the seed. Episode reset seeds and all action draws come from one master
/// stream in a fixed order.
pub fn random_policy_return(kind: EnvKind, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::contract("random_policy_return: episodes must be >= 1"));
    }
    let mut master = ChaCha20Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let env_seed = master.next_u64();
        let (mut state, _) = env_reset(kind, env_seed);
        let mut ep_return = 0.0;
        while !state.is_done() {
            let action: Vec<f64> = (0..kind.action_dim())
                .map(|_| master.gen_range(-1.0..1.0))
                .collect();
            let (next, _, reward, _) = env_step(&state, &action)?;
            ep_return += reward;
            state = next;
        }
        total += ep_return;
    }
    Ok(total / episodes as f64)
}

/// Random-policy baselines at seed 0 over 100 episodes, pinned as
/// regression constants (recomputed by `baselines_are_pinned` in tests).
pub const RANDOM_BASELINE_POINTMASS: f64 = 131.15100145437424;
pub const RANDOM_BASELINE_PENDULUM: f64 = -69.72887136982717;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic() {
        for kind in [EnvKind::PixelPendulum, EnvKind::PixelPointMass] {
            let (s1, o1) = env_reset(kind, 123);
            let (s2, o2) = env_reset(kind, 123);
            assert_eq!(s1, s2);
            let b1: Vec<u64> = o1.iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = o2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn observation_contract() {
        let (_, obs) = env_reset(EnvKind::PixelPendulum, 7);
        assert_eq!(obs.len(), 1600);
        assert!(obs.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn different_seeds_give_distinct_angles() {
        let mut angles: Vec<f64> = (0..100)
            .map(|s| env_reset(EnvKind::PixelPendulum, s).0.pendulum_coords().0)
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        angles.dedup();
        assert!(angles.len() >= 99, "only {} distinct angles", angles.len());
    }

    #[test]
    fn pendulum_upright_reward_is_one() {
        let state = EnvState::pendulum(0.0, 0.0);
        let (_, _, reward, _) = env_step(&state, &[0.0]).unwrap();
        assert!((reward - 1.0).abs() < 1e-12, "reward {}", reward);
    }

    #[test]
    fn point_mass_goal_is_a_fixed_point() {
        let state = EnvState::point_mass(0.5, 0.5, 0.0, 0.0);
        let (next, _, reward, _) = env_step(&state, &[0.0, 0.0]).unwrap();
        assert_eq!(reward, 1.0);
        assert_eq!(next.point_mass_coords(), (0.5, 0.5, 0.0, 0.0));
    }

    #[test]
    fn pendulum_trace_matches_duplicate_integrator() {
        // independent straight-line integrator with the same constants
        let (mut state, _) = env_reset(EnvKind::PixelPendulum, 0);
        let (mut theta, mut omega) = state.pendulum_coords();
        for step in 0..50 {
            let (next, _, _, _) = env_step(&state, &[0.0]).unwrap();
            let accel = -15.0 * (theta + std::f64::consts::PI).sin();
            omega = (omega + accel * 0.05).max(-8.0).min(8.0);
            theta += omega * 0.05;
            let (st, sw) = next.pendulum_coords();
            assert!(
                (st - theta).abs() < 1e-12 && (sw - omega).abs() < 1e-12,
                "step {}: ({}, {}) vs ({}, {})",
                step,
                st,
                sw,
                theta,
                omega
            );
            state = next;
        }
    }

    #[test]
    fn render_is_deterministic_and_binary_for_pendulum() {
        let state = EnvState::pendulum(1.1, 0.0);
        let a = render_state(&state);
        let b = render_state(&state);
        assert_eq!(a, b);
        assert!(a.iter().all(|&p| p == 0.0 || p == 1.0));
        assert!(a.iter().any(|&p| p == 1.0));
    }

    #[test]
    fn upright_pendulum_renders_column_symmetric() {
        let img = render_state(&EnvState::pendulum(0.0, 0.0));
        for r in 0..OBS_SIDE {
            for c in 0..OBS_SIDE {
                assert_eq!(
                    img[r * OBS_SIDE + c],
                    img[r * OBS_SIDE + (OBS_SIDE - 1 - c)],
                    "asymmetry at ({}, {})",
                    r,
                    c
                );
            }
        }
    }

    #[test]
    fn episodes_terminate_exactly_at_200() {
        let (mut state, _) = env_reset(EnvKind::PixelPointMass, 3);
        for step in 1..=EPISODE_LEN {
            let (next, _, _, done) = env_step(&state, &[0.1, -0.1]).unwrap();
            assert_eq!(done, step == EPISODE_LEN, "step {}", step);
            state = next;
        }
        assert!(env_step(&state, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn trajectories_are_bit_deterministic() {
        let run = || {
            let (mut state, obs0) = env_reset(EnvKind::PixelPendulum, 9);
            let mut bits: Vec<u64> = obs0.iter().map(|v| v.to_bits()).collect();
            for i in 0..60 {
                let action = [((i as f64) * 0.37).sin()];
                let (next, obs, reward, _) = env_step(&state, &action).unwrap();
                bits.push(reward.to_bits());
                bits.extend(obs.iter().map(|v| v.to_bits()));
                state = next;
            }
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn point_mass_reward_stays_in_unit_interval() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (mut state, _) = env_reset(EnvKind::PixelPointMass, 11);
        for _ in 0..10_000 {
            if state.is_done() {
                let (s, _) = env_reset(EnvKind::PixelPointMass, rng.next_u64());
                state = s;
            }
            let action = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let (next, _, reward, _) = env_step(&state, &action).unwrap();
            assert!((0.0..=1.0).contains(&reward), "reward {}", reward);
            state = next;
        }
    }

    #[test]
    fn unknown_environment_lists_names() {
        let err = EnvKind::parse("cartpole").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("pixel-pendulum") && msg.contains("pixel-pointmass"), "{msg}");
    }

    #[test]
    fn random_policy_return_is_deterministic_and_bounded() {
        let a = random_policy_return(EnvKind::PixelPendulum, 3, 0).unwrap();
        let b = random_policy_return(EnvKind::PixelPendulum, 3, 0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!((-200.0..=200.0).contains(&a), "return {}", a);
    }

    #[test]
    fn baselines_are_pinned() {
        let pm = random_policy_return(EnvKind::PixelPointMass, 100, 0).unwrap();
        assert_eq!(
            pm.to_bits(),
            RANDOM_BASELINE_POINTMASS.to_bits(),
            "point-mass baseline drifted: {:?}",
            pm
        );
        let pend = random_policy_return(EnvKind::PixelPendulum, 100, 0).unwrap();
        assert_eq!(
            pend.to_bits(),
            RANDOM_BASELINE_PENDULUM.to_bits(),
            "pendulum baseline drifted: {:?}",
            pend
        );
    }
}
