//! Four-parameter logistic curve `Y(x) = L / (1 + exp(-k (x - x0))) + d`
//! fitted by box-constrained Levenberg-Marquardt with an analytic Jacobian.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    /// Amplitude.
    pub l: f64,
    /// Rate per token; negative for decays.
    pub k: f64,
    /// Midpoint in tokens.
    pub x0: f64,
    /// Offset (floor of a decay).
    pub d: f64,
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl LogisticParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.l * sigmoid(self.k * (x - self.x0)) + self.d
    }

    pub fn is_finite(&self) -> bool {
        self.l.is_finite() && self.k.is_finite() && self.x0.is_finite() && self.d.is_finite()
    }

    fn to_array(self) -> [f64; 4] {
        [self.l, self.k, self.x0, self.d]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self {
            l: a[0],
            k: a[1],
            x0: a[2],
            d: a[3],
        }
    }

    /// Partial derivatives with respect to (L, k, x0, d).
    fn gradient(&self, x: f64) -> [f64; 4] {
        let s = sigmoid(self.k * (x - self.x0));
        let ds = s * (1.0 - s);
        [s, self.l * ds * (x - self.x0), -self.l * ds * self.k, 1.0]
    }
}

/// Closed box for each parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticBounds {
    pub l: (f64, f64),
    pub k: (f64, f64),
    pub x0: (f64, f64),
    pub d: (f64, f64),
}

impl LogisticBounds {
    /// Bounds that only admit decaying curves, scaled to the data.
    pub fn decay(xs: &[f64], ys: &[f64]) -> Self {
        let (lo, hi) = min_max(ys);
        let range = hi - lo;
        Self {
            l: (0.0, 10.0 * range),
            k: (-50.0, 0.0),
            x0: (xs[0] - 10.0, xs[xs.len() - 1] + 10.0),
            d: (-range, 2.0 * hi),
        }
    }

    /// Mirror of [`LogisticBounds::decay`] admitting only rising curves.
    pub fn growth(xs: &[f64], ys: &[f64]) -> Self {
        Self {
            k: (0.0, 50.0),
            ..Self::decay(xs, ys)
        }
    }

    fn clamp(&self, p: [f64; 4]) -> [f64; 4] {
        [
            p[0].clamp(self.l.0, self.l.1),
            p[1].clamp(self.k.0, self.k.1),
            p[2].clamp(self.x0.0, self.x0.1),
            p[3].clamp(self.d.0, self.d.1),
        ]
    }

    pub fn contains(&self, p: &LogisticParams) -> bool {
        let inside = |v: f64, (a, b): (f64, f64)| v >= a && v <= b;
        inside(p.l, self.l) && inside(p.k, self.k) && inside(p.x0, self.x0) && inside(p.d, self.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: LogisticParams,
    pub r_squared: f64,
    pub converged: bool,
    /// Euclidean norm of the residual vector.
    pub residual_norm: f64,
}

impl FitResult {
    pub fn sse(&self) -> f64 {
        self.residual_norm * self.residual_norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitDirection {
    Decay,
    Growth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub direction: FitDirection,
    /// Explicit starting points; the data-driven grid is used when empty.
    pub starts: Vec<LogisticParams>,
    /// Overrides the data-driven bounds.
    pub bounds: Option<LogisticBounds>,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            direction: FitDirection::Decay,
            starts: Vec::new(),
            bounds: None,
            max_iter: 500,
        }
    }
}

impl FitOptions {
    pub fn growth() -> Self {
        Self {
            direction: FitDirection::Growth,
            ..Self::default()
        }
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
        (lo.min(y), hi.max(y))
    })
}

/// Multi-start initialization grid: d0 = min, L0 = range, x0 from the first
/// half-range crossing and 25% / 50% of the x range, |k0| in {0.25, 1, 4}.
pub fn initial_grid(xs: &[f64], ys: &[f64], direction: FitDirection) -> Vec<LogisticParams> {
    let (lo, hi) = min_max(ys);
    let half = 0.5 * (lo + hi);
    let (x_first, x_last) = (xs[0], xs[xs.len() - 1]);
    let span = x_last - x_first;
    let crossing = match direction {
        FitDirection::Decay => ys.iter().position(|&y| y <= half),
        FitDirection::Growth => ys.iter().position(|&y| y >= half),
    }
    .map(|i| xs[i])
    .unwrap_or(x_first + 0.5 * span);
    let sign = match direction {
        FitDirection::Decay => -1.0,
        FitDirection::Growth => 1.0,
    };
    let mut grid = Vec::with_capacity(9);
    for x0 in [crossing, x_first + 0.25 * span, x_first + 0.5 * span] {
        for k in [0.25, 1.0, 4.0] {
            grid.push(LogisticParams {
                l: hi - lo,
                k: sign * k,
                x0,
                d: lo,
            });
        }
    }
    grid
}

fn residuals(p: &LogisticParams, xs: &[f64], ys: &[f64], out: &mut [f64]) -> f64 {
    let mut sse = 0.0;
    for ((r, &x), &y) in out.iter_mut().zip(xs).zip(ys) {
        *r = y - p.eval(x);
        sse += *r * *r;
    }
    sse
}

/// Solves the 4x4 symmetric positive definite system by Cholesky.
fn solve4(a: &[[f64; 4]; 4], b: &[f64; 4]) -> Option<[f64; 4]> {
    let mut l = [[0.0f64; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; 4];
    for i in 0..4 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let mut s = y[i];
        for k in i + 1..4 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

struct Run {
    params: LogisticParams,
    sse: f64,
    converged: bool,
}

fn levenberg_marquardt(xs: &[f64], ys: &[f64], start: LogisticParams, bounds: &LogisticBounds, max_iter: usize) -> Run {
    let n = xs.len();
    let mut p = LogisticParams::from_array(bounds.clamp(start.to_array()));
    let mut r = vec![0.0; n];
    let mut trial_r = vec![0.0; n];
    let mut sse = residuals(&p, xs, ys, &mut r);
    let scale = ys.iter().map(|y| y * y).sum::<f64>().max(1e-300);
    let mut lambda = 1e-3;

    for _ in 0..max_iter {
        if sse <= 1e-30 * scale {
            return Run {
                params: p,
                sse,
                converged: true,
            };
        }
        let mut jtj = [[0.0f64; 4]; 4];
        let mut jtr = [0.0f64; 4];
        for (&x, &ri) in xs.iter().zip(&r) {
            let g = p.gradient(x);
            for a in 0..4 {
                jtr[a] += g[a] * ri;
                for b in 0..=a {
                    jtj[a][b] += g[a] * g[b];
                }
            }
        }
        for a in 0..4 {
            for b in 0..a {
                jtj[b][a] = jtj[a][b];
            }
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let mut damped = jtj;
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(1e-12);
            }
            let Some(step) = solve4(&damped, &jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cur = p.to_array();
            let cand = bounds.clamp([cur[0] + step[0], cur[1] + step[1], cur[2] + step[2], cur[3] + step[3]]);
            let cand = LogisticParams::from_array(cand);
            let cand_sse = residuals(&cand, xs, ys, &mut trial_r);
            if cand_sse.is_finite() && cand_sse < sse {
                let rel_drop = (sse - cand_sse) / sse;
                let moved = cur
                    .iter()
                    .zip(cand.to_array())
                    .map(|(a, b)| (a - b).abs() / (a.abs() + 1e-12))
                    .fold(0.0, f64::max);
                p = cand;
                sse = cand_sse;
                std::mem::swap(&mut r, &mut trial_r);
                lambda = (lambda * 0.1).max(1e-15);
                accepted = true;
                if rel_drop < 1e-15 || moved < 1e-15 {
                    return Run {
                        params: p,
                        sse,
                        converged: true,
                    };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left inside the box: local minimum.
            return Run {
                params: p,
                sse,
                converged: true,
            };
        }
    }
    Run {
        params: p,
        sse,
        converged: false,
    }
}

/// Least-squares logistic fit; best of all starts is returned.
///
/// Constant or non-finite data, or too few points, yield `converged = false`.
pub fn fit_logistic_lsq(xs: &[f64], ys: &[f64], opts: &FitOptions) -> FitResult {
    let failed = |params| FitResult {
        params,
        r_squared: f64::NAN,
        converged: false,
        residual_norm: f64::NAN,
    };
    let zero = LogisticParams {
        l: 0.0,
        k: 0.0,
        x0: 0.0,
        d: 0.0,
    };
    if xs.len() != ys.len()
        || xs.len() < 6
        || ys.iter().chain(xs).any(|v| !v.is_finite())
        || xs.windows(2).any(|w| w[1] <= w[0])
    {
        return failed(zero);
    }
    let (lo, hi) = min_max(ys);
    let scale = hi.abs().max(lo.abs());
    if hi - lo <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
        return failed(LogisticParams { d: lo, ..zero });
    }

    let bounds = opts.bounds.unwrap_or_else(|| match opts.direction {
        FitDirection::Decay => LogisticBounds::decay(xs, ys),
        FitDirection::Growth => LogisticBounds::growth(xs, ys),
    });
    let starts = if opts.starts.is_empty() {
        initial_grid(xs, ys, opts.direction)
    } else {
        opts.starts.clone()
    };

    let mut best: Option<Run> = None;
    for start in starts {
        let run = levenberg_marquardt(xs, ys, start, &bounds, opts.max_iter);
        let better = match &best {
            None => true,
            Some(b) => (run.converged && !b.converged) || (run.converged == b.converged && run.sse < b.sse),
        };
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("at least one start");
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sst: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    FitResult {
        params: best.params,
        r_squared: 1.0 - best.sse / sst,
        converged: best.converged && best.sse.is_finite() && best.params.is_finite(),
        residual_norm: best.sse.sqrt(),
    }
}
