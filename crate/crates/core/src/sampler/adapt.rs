//! Warm-up adaptation: dual-averaging step size and windowed diagonal metric.

pub(crate) struct DualAveraging {
    mu: f64,
    target: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

const GAMMA: f64 = 0.05;
const T0: f64 = 10.0;
const KAPPA: f64 = 0.75;

impl DualAveraging {
    pub fn new(step_size: f64, target: f64) -> Self {
        Self { mu: (10.0 * step_size).ln(), target, counter: 0.0, s_bar: 0.0, x_bar: 0.0 }
    }

    /// Update with the latest acceptance statistic; returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let a = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a);
        let x = self.mu - self.s_bar * self.counter.sqrt() / GAMMA;
        let w = self.counter.powf(-KAPPA);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

const INIT_BUFFER: usize = 75;
const TERM_BUFFER: usize = 50;
const BASE_WINDOW: usize = 25;

/// Doubling variance-estimation windows between an initial fast buffer and
/// a terminal buffer.
pub(crate) struct MetricWindows {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window: usize,
    next_end: usize,
    counter: usize,
    enabled: bool,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
    metric: Vec<f64>,
}

impl MetricWindows {
    pub fn new(warmup: usize, dim: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut window) = (INIT_BUFFER, TERM_BUFFER, BASE_WINDOW);
        let enabled = warmup >= 20;
        if enabled && INIT_BUFFER + TERM_BUFFER + BASE_WINDOW > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            window = warmup - init_buffer - term_buffer;
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window,
            next_end: init_buffer + window - 1,
            counter: 0,
            enabled,
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            metric: vec![1.0; dim],
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.warmup - self.term_buffer && self.counter != self.warmup
    }

    fn window_ends(&self) -> bool {
        self.counter == self.next_end && self.counter != self.warmup
    }

    fn advance_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_end == last {
            return;
        }
        self.window *= 2;
        self.next_end = self.counter + self.window;
        if self.next_end != last {
            let boundary = self.next_end + 2 * self.window;
            if boundary >= self.warmup - self.term_buffer {
                self.next_end = last;
            }
        }
    }

    /// Record a warm-up position. Returns true when a new metric is ready.
    pub fn observe(&mut self, q: &[f64]) -> bool {
        if !self.enabled {
            return false;
        }
        if self.in_window() {
            self.n += 1;
            let n = self.n as f64;
            for ((m, s), x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
                let d = x - *m;
                *m += d / n;
                *s += d * (x - *m);
            }
        }
        if self.window_ends() {
            self.advance_window();
            let n = self.n as f64;
            for (v, s) in self.metric.iter_mut().zip(&self.m2) {
                let var = if self.n > 1 { s / (n - 1.0) } else { 1.0 };
                *v = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0));
            }
            self.n = 0;
            self.mean.iter_mut().for_each(|m| *m = 0.0);
            self.m2.iter_mut().for_each(|m| *m = 0.0);
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }

    pub fn metric(&self) -> &[f64] {
        &self.metric
    }
}
