//! Four-stage glucose simulator (morning, day, evening, night).
//!
//! Morning, day and evening take hourly decisions; night is a single
//! eight-hour decision at 22:00 that ends at 6:00 with the daily nutrient
//! reset.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{CyclicEnv, StageSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Period {
    Morning,
    Day,
    Evening,
    Night,
}

impl Period {
    pub const ALL: [Period; 4] = [Period::Morning, Period::Day, Period::Evening, Period::Night];

    pub fn from_stage(stage: usize) -> Period {
        Self::ALL[stage % 4]
    }

    pub fn stage(self) -> usize {
        self as usize
    }

    /// Hour of the last decision of the period.
    pub fn last_hour(self) -> f64 {
        match self {
            Period::Morning => 10.0,
            Period::Day => 16.0,
            Period::Evening => 21.0,
            Period::Night => 22.0,
        }
    }

    pub fn horizon(self) -> usize {
        match self {
            Period::Morning => 5,
            Period::Day => 6,
            Period::Evening => 5,
            Period::Night => 1,
        }
    }

    pub fn duration_hours(self) -> f64 {
        if self == Period::Night {
            8.0
        } else {
            1.0
        }
    }

    fn noise_sd(self) -> f64 {
        match self {
            Period::Morning => 5.5,
            Period::Day => 4.5,
            Period::Evening | Period::Night => 6.0,
        }
    }

    /// Length of the stage state vector.
    pub fn state_dim(self) -> usize {
        match self {
            Period::Morning => 8,
            Period::Day => 11,
            Period::Evening | Period::Night => 14,
        }
    }

    pub fn action_count(self, config: &GlucoseConfig) -> usize {
        match self {
            Period::Morning => 4,
            Period::Day | Period::Evening => 8,
            Period::Night => 2 * config.bedtimes.len(),
        }
    }
}

/// Full physiological state; stage vectors are prefixes of [`GlucoseState::to_vec`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GlucoseState {
    pub t: f64,
    pub g: f64,
    pub dg: f64,
    pub sex: f64,
    pub weight: f64,
    pub c_m: f64,
    pub p_m: f64,
    pub f_m: f64,
    pub c_d: f64,
    pub p_d: f64,
    pub f_d: f64,
    pub c_e: f64,
    pub p_e: f64,
    pub f_e: f64,
}

/// Names of the state vector coordinates, in order.
pub const STATE_FIELDS: [&str; 14] = [
    "t", "G", "dG", "sex", "W", "C_M", "P_M", "F_M", "C_D", "P_D", "F_D", "C_E", "P_E", "F_E",
];

impl GlucoseState {
    pub fn to_vec(&self, dim: usize) -> Vec<f64> {
        let all = [
            self.t,
            self.g,
            self.dg,
            self.sex,
            self.weight,
            self.c_m,
            self.p_m,
            self.f_m,
            self.c_d,
            self.p_d,
            self.f_d,
            self.c_e,
            self.p_e,
            self.f_e,
        ];
        all[..dim].to_vec()
    }

    /// Missing trailing coordinates are zero.
    pub fn from_slice(x: &[f64]) -> Self {
        let v = |i: usize| x.get(i).copied().unwrap_or(0.0);
        Self {
            t: v(0),
            g: v(1),
            dg: v(2),
            sex: v(3),
            weight: v(4),
            c_m: v(5),
            p_m: v(6),
            f_m: v(7),
            c_d: v(8),
            p_d: v(9),
            f_d: v(10),
            c_e: v(11),
            p_e: v(12),
            f_e: v(13),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlucoseAction {
    pub insulin: u8,
    pub meal: u8,
    pub activity: u8,
    /// Bedtime in hours; only read at night.
    pub sleep: f64,
    pub stress_reduction: u8,
    pub hydration: u8,
}

impl Default for GlucoseAction {
    fn default() -> Self {
        Self {
            insulin: 0,
            meal: 0,
            activity: 0,
            sleep: 22.0,
            stress_reduction: 0,
            hydration: 0,
        }
    }
}

impl GlucoseAction {
    pub fn validate(&self) -> Result<()> {
        let ok = self.insulin <= 1
            && self.meal <= 2
            && self.activity <= 2
            && (22.0..=24.0).contains(&self.sleep)
            && self.stress_reduction <= 1
            && self.hydration <= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "glucose action out of range: {self:?}"
            )))
        }
    }
}

/// Carbohydrate, protein and fat grams of a meal type.
pub fn meal_nutrients(meal: u8) -> (f64, f64, f64) {
    match meal {
        1 => (30.0, 10.0, 10.0),
        2 => (70.0, 25.0, 25.0),
        _ => (0.0, 0.0, 0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialStateConfig {
    pub glucose_mean: f64,
    pub glucose_sd: f64,
    pub glucose_min: f64,
    pub glucose_max: f64,
    pub weight_min: f64,
    pub weight_max: f64,
    pub p_sex: f64,
}

impl Default for InitialStateConfig {
    fn default() -> Self {
        Self {
            glucose_mean: 120.0,
            glucose_sd: 30.0,
            glucose_min: 70.0,
            glucose_max: 300.0,
            weight_min: 55.0,
            weight_max: 95.0,
            p_sex: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GlucoseConfig {
    /// Meal type served when the agent chooses to eat.
    pub meal_type: u8,
    /// Activity level used when the agent chooses to exercise.
    pub activity_level: u8,
    /// Context components the agent does not control.
    pub stress_reduction: u8,
    pub hydration: u8,
    pub bedtimes: Vec<f64>,
    /// Coefficient of each unnamed minor cumulative-nutrient term.
    pub other_cumulative_coef: f64,
    /// Multiplier on every noise standard deviation; 0 disables noise.
    pub noise_scale: f64,
    pub discounts: [f64; 4],
    pub initial: InitialStateConfig,
}

impl Default for GlucoseConfig {
    fn default() -> Self {
        Self {
            meal_type: 1,
            activity_level: 1,
            stress_reduction: 0,
            hydration: 0,
            bedtimes: vec![22.0, 23.0, 24.0],
            other_cumulative_coef: 0.01,
            noise_scale: 1.0,
            discounts: [1.0, 1.0, 1.0, 0.9],
            initial: InitialStateConfig::default(),
        }
    }
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

fn pick(flag: u8, yes: f64, no: f64) -> f64 {
    if flag == 1 {
        yes
    } else {
        no
    }
}

/// Unclipped, noise-free glucose prediction for one step.
fn glucose_calc(period: Period, s: &GlucoseState, a: &GlucoseAction, minor: f64) -> f64 {
    let (c, p, f) = meal_nutrients(a.meal);
    let (ai, ap) = (a.insulin as f64, a.activity as f64);
    let (sr, h) = (a.stress_reduction, a.hydration);
    let (srf, hf) = (sr as f64, h as f64);
    let carb_scale = 70.0 / s.weight;
    match period {
        Period::Morning => {
            let early_boost = if s.t < 8.0 { 5.0 } else { 0.0 };
            let carb_mod = pick(h, 1.1, 0.8) * pick(sr, 1.1, 0.7);
            let time_6am = if s.t == 6.0 && a.meal == 0 { 0.25 } else { 1.0 };
            let fat_res = 1.0 + 0.07 * s.f_m;
            let carb_res = 1.0 + 0.005 * c;
            let eff = time_6am * pick(h, 1.1, 0.8) * pick(sr, 1.1, 0.7) / (fat_res * carb_res);
            (10.0 + early_boost)
                + 0.93 * s.g
                + (0.50 + 0.002 * (s.g - 120.0).max(0.0)) * carb_mod * c * carb_scale
                + 0.10 * p
                + 0.03 * f
                - 55.0 * ai * clip(eff, 0.05, 1.5)
                - 4.0 * srf
                - 2.0 * hf
                + 0.0018 * s.c_m * s.weight
                + 0.04 * s.p_m
                - 0.02 * s.f_m
        }
        Period::Day => {
            let carb_proc_eff = pick(sr, 1.0, 0.8) * pick(h, 1.0, 0.85);
            let sr_h_mod = pick(sr, 1.1, 0.8) * pick(h, 1.15, 0.85);
            let eff = (1.0 - (0.002 * s.c_m + 0.004 * s.f_m)) * sr_h_mod;
            let act_carb_syn = -0.15 * (c / 50.0) * ap;
            let act_sr_h_mod = pick(sr, 1.1, 0.9) * pick(h, 1.2, 0.8);
            let synergy = if a.activity > 0 { 1.0 } else { 0.0 };
            5.0 + 0.94 * s.g + 0.42 * carb_proc_eff * c * carb_scale + 0.09 * p
                - 80.0 * ai * clip(eff, 0.1, 1.3)
                + (-20.0 + act_carb_syn) * ap * act_sr_h_mod
                - 8.0 * ai * synergy
                - 6.0 * srf
                - 4.0 * hf
                + 0.0013 * s.c_d * s.weight
                + 0.020 * s.c_m
                + minor * (s.p_d + s.f_d + s.p_m + s.f_m)
        }
        Period::Evening => {
            let carb_proc_eff = pick(sr, 1.0, 0.8) * pick(h, 1.0, 0.85);
            let sr_h_mod = pick(sr, 1.0, 0.8) * pick(h, 1.0, 0.85);
            let fat_res = 0.18 * f + 0.010 * s.f_d + 0.008 * s.f_m;
            let eff = sr_h_mod / (1.0 + fat_res);
            let act_sr_h_mod = pick(sr, 1.0, 0.7) * pick(h, 1.0, 0.75);
            let mut activity = -10.0 * ap * act_sr_h_mod;
            if a.activity > 0 && (c > 45.0 || f > 12.0) {
                activity *= 0.4;
            }
            (10.0 + 0.003 * (s.c_m + s.c_d))
                + 0.94 * s.g
                + 0.40 * carb_proc_eff * c * carb_scale
                + 0.10 * p
                + 0.18 * f
                - 55.0 * ai * clip(eff, 0.1, 1.0)
                + activity
                - 3.0 * srf
                - 1.5 * hf
                + 0.0016 * s.c_e * s.weight
                + minor * (s.p_e + s.f_e + s.c_d + s.f_d + s.c_m + s.p_d)
        }
        Period::Night => {
            let eod_push = 0.15 * s.f_e - 0.08 * s.p_e + pick(sr, -1.0, 1.5) + pick(h, -0.5, 1.0);
            let resist = 0.003 * (s.g - 150.0).max(0.0)
                + 0.01 * s.f_e
                + 0.002 * s.c_e
                + pick(sr, -0.1, 0.3)
                + pick(h, -0.05, 0.2);
            let eff = 1.0 - resist;
            let sleep_hours = (a.sleep - 22.0).max(0.0);
            let sleep_qual = pick(sr, 1.0, 0.7)
                * pick(h, 1.0, 0.8)
                * (1.0 - 0.004 * (s.g - 140.0).max(0.0)).max(0.5);
            let linger =
                0.03 * s.c_e + 0.025 * s.f_e + 0.02 * s.p_e + 0.001 * s.c_m + 0.002 * s.f_d;
            (5.0 + eod_push) + 0.97 * s.g - 30.0 * ai * clip(eff, 0.05, 1.0)
                + (-2.5 * sleep_hours * sleep_qual)
                + linger
                - 0.5 * srf
                - 0.2 * hf
        }
    }
}

/// One step with an explicit additive noise value.
pub fn glucose_step_with_noise(
    period: Period,
    state: &GlucoseState,
    action: &GlucoseAction,
    config: &GlucoseConfig,
    noise: f64,
) -> Result<GlucoseState> {
    action.validate()?;
    if !(state.weight > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "weight must be positive, got {}",
            state.weight
        )));
    }
    let g_next = clip(
        glucose_calc(period, state, action, config.other_cumulative_coef) + noise,
        50.0,
        450.0,
    );
    let mut next = *state;
    next.g = g_next;
    next.dg = (g_next - state.g) / period.duration_hours();
    let (c, p, f) = meal_nutrients(action.meal);
    match period {
        Period::Morning => {
            next.c_m += c;
            next.p_m += p;
            next.f_m += f;
        }
        Period::Day => {
            next.c_d += c;
            next.p_d += p;
            next.f_d += f;
        }
        Period::Evening => {
            next.c_e += c;
            next.p_e += p;
            next.f_e += f;
        }
        Period::Night => {}
    }
    if period == Period::Night {
        next = GlucoseState {
            t: 6.0,
            g: next.g,
            dg: next.dg,
            sex: next.sex,
            weight: next.weight,
            ..GlucoseState::default()
        };
    } else {
        next.t = state.t + 1.0;
    }
    Ok(next)
}

/// One step with Gaussian noise scaled by `config.noise_scale`.
pub fn glucose_step(
    period: Period,
    state: &GlucoseState,
    action: &GlucoseAction,
    config: &GlucoseConfig,
    rng: &mut dyn RngCore,
) -> Result<GlucoseState> {
    let sd = period.noise_sd() * config.noise_scale;
    let noise = if sd > 0.0 {
        Normal::new(0.0, sd).expect("valid normal").sample(rng)
    } else {
        0.0
    };
    glucose_step_with_noise(period, state, action, config, noise)
}

/// Penalty for time outside the target band on the segment from `g0` to `g1`,
/// read at ten midpoints.
pub fn glucose_reward(g0: f64, g1: f64, duration_hours: f64) -> f64 {
    let mut penalty = 0.0;
    for j in 1..=10 {
        let g = g0 + (g1 - g0) * (j as f64 - 0.5) / 10.0;
        penalty += if g < 70.0 {
            3.0
        } else if g > 250.0 {
            2.0
        } else if g >= 180.0 {
            1.0
        } else {
            0.0
        };
    }
    -penalty * duration_hours / 10.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlucoseEnv {
    pub config: GlucoseConfig,
    specs: Vec<StageSpec>,
}

pub fn make_glucose_env() -> GlucoseEnv {
    GlucoseEnv::new(GlucoseConfig::default()).expect("default glucose config is valid")
}

impl GlucoseEnv {
    pub fn new(config: GlucoseConfig) -> Result<Self> {
        if !(1..=2).contains(&config.meal_type) || !(1..=2).contains(&config.activity_level) {
            return Err(Error::InvalidArgument(
                "meal_type and activity_level must be 1 or 2".into(),
            ));
        }
        if config.stress_reduction > 1 || config.hydration > 1 {
            return Err(Error::InvalidArgument(
                "stress_reduction and hydration must be 0 or 1".into(),
            ));
        }
        if config.bedtimes.is_empty() || config.bedtimes.iter().any(|b| !(22.0..=24.0).contains(b))
        {
            return Err(Error::InvalidArgument(
                "bedtimes must lie in [22, 24]".into(),
            ));
        }
        if !(config.noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise_scale must be nonnegative".into(),
            ));
        }
        let init = &config.initial;
        if !(init.weight_min > 0.0
            && init.weight_min <= init.weight_max
            && init.glucose_min <= init.glucose_max)
        {
            return Err(Error::InvalidArgument(
                "initial-state ranges are invalid".into(),
            ));
        }
        let specs = Period::ALL
            .iter()
            .map(|&p| {
                Ok(StageSpec::new(
                    p.state_dim(),
                    p.action_count(&config),
                    p.horizon(),
                    config.discounts[p.stage()],
                )?
                .with_reward_max(3.0 * p.duration_hours()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, specs })
    }

    pub fn decode_action(&self, period: Period, action: usize) -> GlucoseAction {
        let c = &self.config;
        let mut a = GlucoseAction {
            insulin: (action % 2) as u8,
            stress_reduction: c.stress_reduction,
            hydration: c.hydration,
            ..GlucoseAction::default()
        };
        match period {
            Period::Morning => {
                a.meal = if (action / 2) % 2 == 1 {
                    c.meal_type
                } else {
                    0
                };
            }
            Period::Day | Period::Evening => {
                a.meal = if (action / 2) % 2 == 1 {
                    c.meal_type
                } else {
                    0
                };
                a.activity = if (action / 4) % 2 == 1 {
                    c.activity_level
                } else {
                    0
                };
            }
            Period::Night => {
                a.sleep = c.bedtimes[(action / 2).min(c.bedtimes.len() - 1)];
            }
        }
        a
    }

    /// A 6:00 state drawn from the configured initial distribution.
    pub fn sample_morning_state(&self, rng: &mut dyn RngCore) -> GlucoseState {
        let init = &self.config.initial;
        let g = Normal::new(init.glucose_mean, init.glucose_sd)
            .expect("valid normal")
            .sample(rng);
        GlucoseState {
            t: 6.0,
            g: clip(g, init.glucose_min, init.glucose_max),
            sex: if rng.random_bool(init.p_sex) {
                1.0
            } else {
                0.0
            },
            weight: rng.random_range(init.weight_min..=init.weight_max),
            ..GlucoseState::default()
        }
    }
}

impl CyclicEnv for GlucoseEnv {
    fn stages(&self) -> &[StageSpec] {
        &self.specs
    }

    fn is_terminal(&self, stage: usize, state: &[f64], _action: usize) -> bool {
        let p = Period::from_stage(stage);
        p == Period::Night || state[0] >= p.last_hour()
    }

    fn stage_transition(&self, stage: usize, exit_state: &[f64]) -> Vec<f64> {
        let next = Period::from_stage(stage + 1);
        GlucoseState::from_slice(exit_state).to_vec(next.state_dim())
    }

    fn step(
        &self,
        stage: usize,
        state: &[f64],
        action: usize,
        rng: &mut dyn RngCore,
    ) -> (f64, Vec<f64>) {
        let p = Period::from_stage(stage);
        let s = GlucoseState::from_slice(state);
        let a = self.decode_action(p, action);
        let next =
            glucose_step(p, &s, &a, &self.config, rng).expect("decoded glucose actions are valid");
        (
            glucose_reward(s.g, next.g, p.duration_hours()),
            next.to_vec(p.state_dim()),
        )
    }

    fn sample_initial(&self, stage: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut state = self
            .sample_morning_state(rng)
            .to_vec(Period::Morning.state_dim());
        for k in 0..stage {
            let actions = self.specs[k].action_count;
            loop {
                let a = rng.random_range(0..actions);
                let terminal = self.is_terminal(k, &state, a);
                let (_, next) = self.step(k, &state, a, rng);
                if terminal {
                    state = self.stage_transition(k, &next);
                    break;
                }
                state = next;
            }
        }
        state
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn quiet() -> GlucoseConfig {
        GlucoseConfig {
            noise_scale: 0.0,
            ..Default::default()
        }
    }

    fn state(t: f64, g: f64) -> GlucoseState {
        GlucoseState {
            t,
            g,
            weight: 70.0,
            ..Default::default()
        }
    }

    #[test]
    fn morning_zero_noise_example() {
        let next = glucose_step(
            Period::Morning,
            &state(9.0, 100.0),
            &GlucoseAction::default(),
            &quiet(),
            &mut stream(0),
        )
        .unwrap();
        assert_eq!(next.g, 103.0);
        assert_eq!(next.t, 10.0);
        assert_eq!(next.dg, 3.0);
    }

    #[test]
    fn early_boost_before_eight() {
        let next = glucose_step_with_noise(
            Period::Morning,
            &state(7.0, 100.0),
            &GlucoseAction::default(),
            &quiet(),
            0.0,
        )
        .unwrap();
        assert_eq!(next.g, 108.0);
    }

    #[test]
    fn meal_table_and_bookkeeping() {
        assert_eq!(meal_nutrients(0), (0.0, 0.0, 0.0));
        assert_eq!(meal_nutrients(1), (30.0, 10.0, 10.0));
        assert_eq!(meal_nutrients(2), (70.0, 25.0, 25.0));
        let meal = GlucoseAction {
            meal: 1,
            ..Default::default()
        };
        let m = glucose_step_with_noise(Period::Morning, &state(8.0, 100.0), &meal, &quiet(), 0.0)
            .unwrap();
        assert_eq!((m.c_m, m.p_m, m.f_m), (30.0, 10.0, 10.0));
        assert_eq!((m.c_d, m.c_e), (0.0, 0.0));
        let d = glucose_step_with_noise(
            Period::Day,
            &GlucoseState { t: 12.0, ..m },
            &meal,
            &quiet(),
            0.0,
        )
        .unwrap();
        assert_eq!(
            (d.c_m, d.c_d, d.p_d, d.f_d, d.c_e, d.p_e, d.f_e),
            (30.0, 30.0, 10.0, 10.0, 0.0, 0.0, 0.0)
        );
        let e = glucose_step_with_noise(
            Period::Evening,
            &GlucoseState { t: 18.0, ..d },
            &meal,
            &quiet(),
            0.0,
        )
        .unwrap();
        assert_eq!((e.c_m, e.c_d, e.c_e), (30.0, 30.0, 30.0));
    }

    #[test]
    fn glucose_is_clipped() {
        let hi = glucose_step_with_noise(
            Period::Day,
            &state(12.0, 440.0),
            &GlucoseAction::default(),
            &quiet(),
            1e6,
        )
        .unwrap();
        assert_eq!(hi.g, 450.0);
        let lo = glucose_step_with_noise(
            Period::Day,
            &state(12.0, 55.0),
            &GlucoseAction::default(),
            &quiet(),
            -1e6,
        )
        .unwrap();
        assert_eq!(lo.g, 50.0);
    }

    #[test]
    fn night_resets_at_six() {
        let s = GlucoseState {
            t: 22.0,
            g: 150.0,
            c_m: 30.0,
            c_d: 70.0,
            f_e: 25.0,
            sex: 1.0,
            weight: 80.0,
            ..Default::default()
        };
        let n =
            glucose_step_with_noise(Period::Night, &s, &GlucoseAction::default(), &quiet(), 0.0)
                .unwrap();
        assert_eq!(n.t, 6.0);
        assert_eq!((n.c_m, n.c_d, n.f_e, n.p_e), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((n.sex, n.weight), (1.0, 80.0));
        assert!((n.dg - (n.g - 150.0) / 8.0).abs() < 1e-12);
    }

    #[test]
    fn reward_examples() {
        assert_eq!(glucose_reward(100.0, 100.0, 1.0), 0.0);
        assert_eq!(glucose_reward(60.0, 60.0, 1.0), -3.0);
        assert_eq!(glucose_reward(300.0, 300.0, 8.0), -16.0);
        assert_eq!(glucose_reward(180.0, 180.0, 1.0), -1.0);
        assert_eq!(glucose_reward(250.0, 250.0, 1.0), -1.0);
        assert_eq!(glucose_reward(70.0, 70.0, 1.0), 0.0);
        assert_eq!(glucose_reward(179.9, 179.9, 1.0), 0.0);
        assert_eq!(glucose_reward(250.1, 250.1, 1.0), -2.0);
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let bad = GlucoseAction {
            meal: 3,
            ..Default::default()
        };
        assert!(
            glucose_step_with_noise(Period::Day, &state(12.0, 100.0), &bad, &quiet(), 0.0).is_err()
        );
        let bad = GlucoseAction {
            sleep: 21.0,
            ..Default::default()
        };
        assert!(
            glucose_step_with_noise(Period::Night, &state(22.0, 100.0), &bad, &quiet(), 0.0)
                .is_err()
        );
    }

    #[test]
    fn env_structure() {
        let env = make_glucose_env();
        assert_eq!(env.action_counts(), vec![4, 8, 8, 6]);
        assert!((crate::mdp::cycle_discount(env.stages()).unwrap() - 0.9).abs() < 1e-15);
        let mut r = stream(1);
        let policy = crate::mdp::PolicyVector::uniform(&env.action_counts());
        let s0 = env.sample_initial(0, &mut r);
        let out = crate::mdp::simulate(&env, &policy, 0, &s0, 1, &mut r).unwrap();
        assert_eq!(out.decisions, 17);
        assert_eq!(out.forced_terminations, 0);
        for k in 0..4 {
            let s = env.sample_initial(k, &mut r);
            assert_eq!(s.len(), env.stages()[k].state_dim);
            assert_eq!(s[0], [6.0, 11.0, 17.0, 22.0][k]);
        }
    }

    #[test]
    fn action_decoding() {
        let env = make_glucose_env();
        let a = env.decode_action(Period::Day, 7);
        assert_eq!((a.insulin, a.meal, a.activity), (1, 1, 1));
        let a = env.decode_action(Period::Night, 5);
        assert_eq!((a.insulin, a.sleep), (1, 24.0));
        let a = env.decode_action(Period::Morning, 2);
        assert_eq!((a.insulin, a.meal, a.activity), (0, 1, 0));
    }
}
