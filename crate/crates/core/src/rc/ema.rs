//! Moving average of the stream-set size over irregular sample times.
//!
//! The signal is treated as linearly interpolated between samples, which gives
//! the update `value' = u*value + (v - u)*s_n + (1 - v)*s_next` with
//! `a = dt / tau`, `u = exp(-a)` and `v = (1 - u) / a`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaParams {
    /// Time constant in seconds.
    pub tau: f64,
    /// Prefetch fires while the average is below this many blocks.
    pub threshold: f64,
    /// Minimum seconds between prefetches.
    pub cooldown: f64,
}

impl Default for EmaParams {
    fn default() -> Self {
        Self { tau: 5.0, threshold: 64.0, cooldown: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum EmaError {
    #[error("sample time {next} does not follow {last}")]
    NonIncreasing { last: f64, next: f64 },
    #[error("tau must be positive and finite")]
    InvalidTau,
}

/// `(u, v)` for a step of `a = dt / tau`; `v` stays accurate as `a -> 0`.
pub fn ema_coefficients(a: f64) -> (f64, f64) {
    let u = (-a).exp();
    let v = if a == 0.0 { 1.0 } else { -(-a).exp_m1() / a };
    (u, v)
}

pub fn ema_step(value: f64, s_n: f64, s_next: f64, a: f64) -> f64 {
    let (u, v) = ema_coefficients(a);
    u * value + (v - u) * s_n + (1.0 - v) * s_next
}

#[derive(Debug, Clone)]
pub struct EmaState {
    params: EmaParams,
    value: f64,
    last_t: f64,
    last_s: f64,
    last_prefetch_t: Option<f64>,
}

impl EmaState {
    pub fn new(params: EmaParams, t0: f64) -> Result<Self, EmaError> {
        if !(params.tau > 0.0 && params.tau.is_finite()) {
            return Err(EmaError::InvalidTau);
        }
        Ok(Self { params, value: 0.0, last_t: t0, last_s: 0.0, last_prefetch_t: None })
    }

    pub fn params(&self) -> &EmaParams {
        &self.params
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn last_t(&self) -> f64 {
        self.last_t
    }

    /// Advance to `t_next` given the previous and current sample.
    pub fn update(&mut self, t_next: f64, s_n: f64, s_next: f64) -> Result<f64, EmaError> {
        if !(t_next > self.last_t) {
            return Err(EmaError::NonIncreasing { last: self.last_t, next: t_next });
        }
        let a = (t_next - self.last_t) / self.params.tau;
        self.value = ema_step(self.value, s_n, s_next, a).max(0.0);
        self.last_t = t_next;
        self.last_s = s_next;
        Ok(self.value)
    }

    /// Like [`update`](Self::update) with the previous sample remembered.
    pub fn observe(&mut self, t: f64, size: f64) -> Result<f64, EmaError> {
        self.update(t, self.last_s, size)
    }

    /// Whether a prefetch is due at `now`; a `true` answer starts the cooldown.
    pub fn prefetch_due(&mut self, now: f64) -> bool {
        let cooled = self.last_prefetch_t.is_none_or(|t| now - t >= self.params.cooldown);
        if self.value < self.params.threshold && cooled {
            self.last_prefetch_t = Some(now);
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exponentially weighted integral of the interpolated signal, by Simpson's rule.
    fn reference(value: f64, s_n: f64, s_next: f64, dt: f64, tau: f64) -> f64 {
        let n = 20_000;
        let h = dt / n as f64;
        let f = |t: f64| {
            let s = s_n + (s_next - s_n) * t / dt;
            (-(dt - t) / tau).exp() * s / tau
        };
        let mut sum = f(0.0) + f(dt);
        for i in 1..n {
            sum += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        (-dt / tau).exp() * value + sum * h / 3.0
    }

    #[test]
    fn constant_signal_is_a_fixed_point() {
        for &c in &[0.0, 1.0, 64.0, 1234.5, 1e6] {
            for &a in &[1e-9, 1e-3, 0.1, 1.0, 7.5, 50.0] {
                assert!((ema_step(c, c, c, a) - c).abs() <= 1e-9 * c.max(1.0), "c={c} a={a}");
            }
        }
    }

    #[test]
    fn unit_step_matches_numeric_integral() {
        let (u, v) = ema_coefficients(1.0);
        assert!((u - 0.367879).abs() < 1e-6);
        assert!((v - 0.632121).abs() < 1e-6);
        let got = ema_step(0.0, 0.0, 100.0, 1.0);
        assert!((got - 36.788).abs() < 1e-3);
        assert!((got - reference(0.0, 0.0, 100.0, 5.0, 5.0)).abs() < 1e-6);
    }

    #[test]
    fn arbitrary_steps_match_numeric_integral() {
        for &(value, s_n, s_next, dt) in &[(10.0, 50.0, 0.0, 0.3), (400.0, 3.0, 900.0, 12.0), (0.0, 1.0, 1.0, 0.01)] {
            let got = ema_step(value, s_n, s_next, dt / 5.0);
            let want = reference(value, s_n, s_next, dt, 5.0);
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
    }

    #[test]
    fn tiny_steps_barely_move() {
        let mut s = EmaState::new(EmaParams::default(), 0.0).unwrap();
        s.update(1.0, 20.0, 20.0).unwrap();
        let before = s.value();
        let after = s.update(1.0 + 5.0 / 1000.0, 20.0, 500.0).unwrap();
        assert!((after - before).abs() <= 1e-3 * (500.0 - before).abs());
    }

    #[test]
    fn non_increasing_time_is_rejected() {
        let mut s = EmaState::new(EmaParams::default(), 2.0).unwrap();
        assert!(matches!(s.update(2.0, 0.0, 1.0), Err(EmaError::NonIncreasing { .. })));
        assert!(s.update(1.0, 0.0, 1.0).is_err());
        assert!(EmaState::new(EmaParams { tau: 0.0, ..EmaParams::default() }, 0.0).is_err());
    }

    #[test]
    fn stays_between_inputs_on_monotone_segment() {
        let mut s = EmaState::new(EmaParams::default(), 0.0).unwrap();
        let mut t = 0.0;
        for i in 1..200 {
            t += 0.033 * (1 + i % 3) as f64;
            let v = s.observe(t, i as f64).unwrap();
            assert!((0.0..=i as f64).contains(&v));
        }
    }

    #[test]
    fn prefetch_respects_threshold_and_cooldown() {
        let mut s = EmaState::new(EmaParams::default(), 0.0).unwrap();
        assert!(s.prefetch_due(0.5));
        assert!(!s.prefetch_due(2.5));
        assert!(s.prefetch_due(5.5));
        let mut busy = EmaState::new(EmaParams::default(), 0.0).unwrap();
        for i in 1..100 {
            busy.observe(i as f64 * 0.5, 1000.0).unwrap();
        }
        assert!(busy.value() >= 64.0);
        assert!(!busy.prefetch_due(100.0));
    }
}
