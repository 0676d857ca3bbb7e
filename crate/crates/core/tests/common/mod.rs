#![allow(dead_code)]

use evdose::tensor::{Graph, Grid, NodeId, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut ChaCha8Rng, shape: Shape, lo: f32, hi: f32) -> Grid {
    Grid::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values whose magnitude is at least `gap`, with random sign.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape, gap: f32, hi: f32) -> Grid {
    Grid::from_fn(shape, |_| {
        let m = rng.random_range(gap..hi);
        if rng.random::<bool>() { m } else { -m }
    })
}

fn weights_for(shape: Shape) -> Grid {
    if shape.len() == 1 {
        return Grid::full(shape, 1.0);
    }
    let mut r = rng(0x5745_4947 ^ shape.len() as u64);
    random_grid(&mut r, shape, -1.0, 1.0)
}

fn objective(value: &Grid, weights: &Grid) -> f64 {
    value
        .data()
        .iter()
        .zip(weights.data())
        .map(|(&v, &w)| v as f64 * w as f64)
        .sum()
}

/// Relative error `|g_ad - g_fd| / max(|g_ad|, |g_fd|)` (Euclidean norms
/// over every input element) between reverse-mode gradients of
/// `sum(w * f(inputs))` and Richardson-extrapolated central differences
/// with steps `h` and `h / 2`. The graph is rebuilt from `graph_seed` for
/// each evaluation so dropout masks repeat.
pub fn gradcheck<F>(inputs: &[Grid], graph_seed: u64, h: f32, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |xs: &[Grid]| -> (Graph, Vec<NodeId>, NodeId) {
        let mut g = Graph::new(graph_seed);
        let ids: Vec<NodeId> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let root = build(&mut g, &ids);
        (g, ids, root)
    };
    let (g, ids, root) = eval(inputs);
    let weights = weights_for(g.shape(root));
    let grads = g.backward_with_seed(root, weights.clone()).expect("backward");
    let mut diff2 = 0.0f64;
    let mut ad2 = 0.0f64;
    let mut fd2 = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let ad = grads.get(ids[k]).cloned().unwrap_or_else(|| Grid::zeros(x.shape()));
        for i in 0..x.len() {
            let central = |step: f32| -> f64 {
                let mut xs = inputs.to_vec();
                xs[k].data_mut()[i] = x.data()[i] + step;
                let (gp, _, rp) = eval(&xs);
                let fp = objective(gp.value(rp), &weights);
                xs[k].data_mut()[i] = x.data()[i] - step;
                let (gm, _, rm) = eval(&xs);
                let fm = objective(gm.value(rm), &weights);
                // the perturbed inputs are rounded to f32, so divide by the
                // step actually taken
                let taken = (x.data()[i] + step) as f64 - (x.data()[i] - step) as f64;
                (fp - fm) / taken
            };
            let fd = (4.0 * central(0.5 * h) - central(h)) / 3.0;
            let a = ad.data()[i] as f64;
            diff2 += (a - fd).powi(2);
            ad2 += a * a;
            fd2 += fd * fd;
        }
    }
    let scale = ad2.sqrt().max(fd2.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff2.sqrt() / scale
    }
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// Running mean and standard error of a stream of samples.
#[derive(Default)]
pub struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.n).sqrt()
    }
}

/// Prints a one-line verdict and returns whether it passed.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("criterion {id:>2} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

/// One named finite-difference configuration.
pub struct GradCase {
    pub name: String,
    pub rel_error: f64,
}

fn case<F>(name: &str, inputs: &[Grid], seed: u64, build: F) -> GradCase
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    GradCase {
        name: name.to_string(),
        rel_error: gradcheck(inputs, seed, 1e-2, build),
    }
}

/// Finite-difference checks of every differentiable tape operation and of
/// both evidential losses, on randomly drawn inputs.
pub fn gradcheck_suite(seed: u64) -> Vec<GradCase> {
    use evdose::evidential::constrain_raw_nodes;
    use evdose::loss::{batch_loss, squared_error_loss, LossConfig, LossVariant};
    use evdose::tensor::{Padding, Unary};

    let mut r = rng(seed);
    let s = Shape::new(2, 2, 3, 2);
    let mut out = Vec::new();

    let unary: Vec<(&str, Unary, Grid)> = vec![
        ("relu", Unary::Relu, away_from_zero(&mut r, s, 0.05, 2.0)),
        ("sigmoid", Unary::Sigmoid, random_grid(&mut r, s, -4.0, 4.0)),
        ("softplus", Unary::Softplus, random_grid(&mut r, s, -4.0, 4.0)),
        ("exp", Unary::Exp, random_grid(&mut r, s, -2.0, 2.0)),
        ("log", Unary::Log, random_grid(&mut r, s, 0.2, 4.0)),
        ("lgamma", Unary::Lgamma, random_grid(&mut r, s, 0.3, 6.0)),
        ("abs", Unary::Abs, away_from_zero(&mut r, s, 0.05, 2.0)),
        ("square", Unary::Square, random_grid(&mut r, s, -2.0, 2.0)),
        ("recip", Unary::Recip, away_from_zero(&mut r, s, 0.3, 2.0)),
        ("neg", Unary::Neg, random_grid(&mut r, s, -2.0, 2.0)),
        ("scale", Unary::Scale(-1.7), random_grid(&mut r, s, -2.0, 2.0)),
        ("shift", Unary::Shift(0.3), random_grid(&mut r, s, -2.0, 2.0)),
    ];
    for (name, kind, x) in unary {
        out.push(case(name, &[x], seed, |g, v| g.unary(kind, v[0]).unwrap()));
    }

    let a = random_grid(&mut r, s, -2.0, 2.0);
    let b = random_grid(&mut r, s, -2.0, 2.0);
    let d = away_from_zero(&mut r, s, 0.4, 2.0);
    out.push(case("add", &[a.clone(), b.clone()], seed, |g, v| g.add(v[0], v[1]).unwrap()));
    out.push(case("sub", &[a.clone(), b.clone()], seed, |g, v| g.sub(v[0], v[1]).unwrap()));
    out.push(case("mul", &[a.clone(), b.clone()], seed, |g, v| g.mul(v[0], v[1]).unwrap()));
    out.push(case("div", &[a.clone(), d], seed, |g, v| g.div(v[0], v[1]).unwrap()));

    for (cin, cout, e, padding) in [(2, 3, 4, Padding::Same), (3, 2, 3, Padding::Valid)] {
        let x = random_grid(&mut r, Shape::new(cin, e, e, e), -1.0, 1.0);
        let k = random_grid(&mut r, Shape::new(cin * cout, 3, 3, 3), -0.5, 0.5);
        let bias = random_grid(&mut r, Shape::new(cout, 1, 1, 1), -0.5, 0.5);
        out.push(case(&format!("conv3d {padding:?}"), &[x, k, bias], seed, move |g, v| {
            g.conv3d(v[0], v[1], v[2], padding).unwrap()
        }));
    }

    let pool_shape = Shape::new(2, 4, 4, 2);
    let mut vals: Vec<f32> = (0..pool_shape.len()).map(|i| i as f32 * 0.05).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let pooled = Grid::from_vec(pool_shape, vals).unwrap();
    out.push(case("maxpool3d", &[pooled], seed, |g, v| g.maxpool3d(v[0], 2).unwrap()));

    let low = random_grid(&mut r, Shape::new(2, 1, 2, 1), -1.0, 1.0);
    let skip = random_grid(&mut r, Shape::new(1, 2, 4, 2), -1.0, 1.0);
    out.push(case("upsample_concat", &[low, skip], seed, |g, v| g.upsample_concat(v[0], v[1]).unwrap()));

    let x = random_grid(&mut r, s, -2.0, 2.0);
    out.push(case("dropout", std::slice::from_ref(&x), seed, |g, v| g.dropout(v[0], 0.4, true).unwrap()));
    out.push(case("channel", std::slice::from_ref(&x), seed, |g, v| g.channel(v[0], 1).unwrap()));
    let mask = Grid::from_fn(s, |[c, d, h, w]| ((c + d + h + w) % 3 != 0) as u8 as f32);
    out.push(case("masked_mean", &[x], seed, move |g, v| g.masked_mean(v[0], &mask).unwrap()));

    let field = Shape::new(1, 2, 2, 2);
    for (i, variant) in [LossVariant::Refined, LossVariant::Refined, LossVariant::Refined, LossVariant::Original, LossVariant::Original]
        .into_iter()
        .enumerate()
    {
        let raw = random_grid(&mut r, field.with_channels(4), -2.0, 2.0);
        let target = random_grid(&mut r, field, -2.5, 1.5);
        let mask = Grid::from_fn(field, |[_, d, h, w]| ((d + h + w + i) % 4 != 0) as u8 as f32);
        let cfg = LossConfig {
            variant,
            lambda_kl: r.random_range(0.0..0.1),
            lambda_mse: r.random_range(0.0..0.2),
        };
        let name = format!("{variant:?} loss #{i}");
        out.push(case(&name, &[raw], seed, move |g, v| {
            let nig = constrain_raw_nodes(g, v[0]).unwrap();
            batch_loss(g, &nig, &target, &mask, &cfg).unwrap()
        }));
    }

    let pred = random_grid(&mut r, field, -2.0, 2.0);
    let target = random_grid(&mut r, field, -2.0, 2.0);
    let mask = Grid::full(field, 1.0);
    out.push(case("squared error loss", &[pred], seed, move |g, v| {
        squared_error_loss(g, v[0], &target, &mask).unwrap()
    }));
    out
}

/// Density of `N(x | mean, var)`.
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Density of the inverse-gamma distribution in `s = sigma^2`.
pub fn inv_gamma_pdf(s: f64, alpha: f64, beta: f64) -> f64 {
    use evdose::tensor::special::ln_gamma;
    (alpha * beta.ln() - ln_gamma(alpha) - (alpha + 1.0) * s.ln() - beta / s).exp()
}

/// Marginal density of `L` under a Gaussian likelihood with a NIG prior,
/// integrated numerically: over `mu` for each `sigma^2`, then over
/// `t = ln sigma^2`. Neither integral uses the closed-form Student-t.
pub fn nig_marginal_by_quadrature(l: f64, gamma: f64, nu: f64, alpha: f64, beta: f64) -> f64 {
    let inner = |s: f64| -> f64 {
        let prior_var = s / nu;
        let centre = (l + nu * gamma) / (1.0 + nu);
        let width = (s / (1.0 + nu)).sqrt();
        let f = |mu: f64| normal_pdf(l, mu, s) * normal_pdf(mu, gamma, prior_var);
        let peak = f(centre).max(1e-300);
        adaptive_simpson(&f, centre - 14.0 * width, centre + 14.0 * width, peak * width * 1e-11, 40)
    };
    let outer = |t: f64| -> f64 {
        let s = t.exp();
        inner(s) * inv_gamma_pdf(s, alpha, beta) * s
    };
    let mode = (beta / (alpha + 1.0)).ln();
    let lo = mode - 14.0;
    let hi = mode + 60.0 / (alpha + 0.5) + 2.0 * (1.0 + (l - gamma).abs()).ln() + 6.0;
    // split at the mode so the adaptive rule sees the peak
    let mut total = 0.0;
    let knots = [lo, mode - 3.0, mode, mode + 3.0, hi];
    for w in knots.windows(2) {
        let scale = outer(0.5 * (w[0] + w[1])).abs().max(outer(mode).abs()) * (w[1] - w[0]);
        total += adaptive_simpson(&outer, w[0], w[1], scale * 1e-10, 40);
    }
    total
}

/// Largest relative error between `student_t_marginal` and quadrature over
/// `draws` random parameter sets with alpha in (1, 10], beta in [1e-3, 10],
/// nu in (0, 10].
pub fn student_t_quadrature_check(seed: u64, draws: usize) -> f64 {
    use evdose::evidential::NigVoxel;
    use evdose::loss::student_t_marginal;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let alpha = 1.0 + r.random_range(1e-3..9.0);
        let beta = 10f64.powf(r.random_range(-3.0..1.0));
        let nu = 10f64.powf(r.random_range(-2.0..1.0));
        let gamma = r.random_range(-3.0..2.0);
        let spread = (beta / (alpha * nu.min(1.0))).sqrt().max(0.05);
        let l = gamma + r.random_range(-2.0..2.0) * spread;
        let v = NigVoxel::new(gamma, nu, alpha, beta).unwrap();
        let closed = student_t_marginal(l, &v).unwrap();
        let numeric = nig_marginal_by_quadrature(l, gamma, nu, alpha, beta);
        worst = worst.max((closed - numeric).abs() / numeric.abs());
    }
    worst
}

/// Draws `(mu, sigma^2)` from a NIG.
pub fn sample_nig(r: &mut ChaCha8Rng, gamma: f64, nu: f64, alpha: f64, beta: f64) -> (f64, f64) {
    use rand_distr::{Distribution, Gamma, Normal};
    let precision = Gamma::new(alpha, 1.0 / beta).unwrap().sample(r);
    let s = 1.0 / precision;
    let mu = Normal::new(gamma, (s / nu).sqrt()).unwrap().sample(r);
    (mu, s)
}

/// Outcome of one Monte-Carlo comparison: `|estimate - expected|` in
/// standard errors.
pub struct McCheck {
    pub label: String,
    pub z: f64,
}

/// Monte-Carlo checks of `E[mu]`, `E[sigma^2]` and `Var[mu]` against the
/// closed-form moments. Alpha is kept above 4 so the estimators have
/// finite variance and the standard errors are meaningful.
pub fn nig_moment_checks(seed: u64, sets: usize, draws: usize) -> Vec<McCheck> {
    use evdose::evidential::NigVoxel;
    let mut r = rng(seed);
    let mut out = Vec::new();
    for k in 0..sets {
        let gamma = r.random_range(-2.0..2.0);
        let nu = r.random_range(0.2..10.0);
        let alpha = r.random_range(4.5..10.0);
        let beta = r.random_range(0.01..10.0);
        let m = NigVoxel::new(gamma, nu, alpha, beta).unwrap().moments().unwrap();
        let (mut mean_mu, mut mean_s, mut var_mu) = (Welford::default(), Welford::default(), Welford::default());
        for _ in 0..draws {
            let (mu, s) = sample_nig(&mut r, gamma, nu, alpha, beta);
            mean_mu.push(mu);
            mean_s.push(s);
            var_mu.push((mu - gamma).powi(2));
        }
        for (name, w, expected) in [
            ("E[mu]", &mean_mu, m.mean),
            ("E[sigma^2]", &mean_s, m.aleatoric),
            ("Var[mu]", &var_mu, m.epistemic),
        ] {
            out.push(McCheck {
                label: format!("set {k} {name}"),
                z: (w.mean() - expected).abs() / w.std_error(),
            });
        }
    }
    out
}

/// Hierarchical sampling `sigma^2 -> mu -> y`: the variance of `y` should be
/// `U_a + U_e`.
pub fn total_variance_checks(seed: u64, sets: usize, draws: usize) -> Vec<McCheck> {
    use evdose::evidential::NigVoxel;
    use rand_distr::{Distribution, Normal};
    let mut r = rng(seed);
    let mut out = Vec::new();
    for k in 0..sets {
        let gamma = r.random_range(-2.0..2.0);
        let nu = r.random_range(0.2..10.0);
        let alpha = r.random_range(4.5..10.0);
        let beta = r.random_range(0.01..10.0);
        let m = NigVoxel::new(gamma, nu, alpha, beta).unwrap().moments().unwrap();
        let mut w = Welford::default();
        for _ in 0..draws {
            let (mu, s) = sample_nig(&mut r, gamma, nu, alpha, beta);
            let y = Normal::new(mu, s.sqrt()).unwrap().sample(&mut r);
            w.push((y - gamma).powi(2));
        }
        out.push(McCheck {
            label: format!("set {k} Var[y]"),
            z: (w.mean() - (m.aleatoric + m.epistemic)).abs() / w.std_error(),
        });
    }
    out
}
