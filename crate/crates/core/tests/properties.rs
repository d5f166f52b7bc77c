use dedtwin_core::control::{pid_step, ActuatorLimits, LoopConfig, PidGains, PidState};
use dedtwin_core::plant::{run_open_loop, ExperimentProtocol, PlantConfig, Segment};
use dedtwin_core::signals::{metrics_from_slices, moving_average, MinMax, TimeSeries};
use dedtwin_core::surrogate::split_indices;
use dedtwin_core::sysid::{fit_arx, simulate_first_order, FirstOrderDelayModel};
use dedtwin_core::vision::{largest_inscribed_circle, smallest_enclosing_circle, Mask};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn series(values: Vec<f64>, dt: f64) -> TimeSeries {
    TimeSeries::new(0.0, dt, values, "").unwrap()
}

fn model() -> impl Strategy<Value = FirstOrderDelayModel> {
    (0.05f64..3.0, 0.05f64..2.0, 0usize..40).prop_map(|(k, tw, d)| FirstOrderDelayModel { k_gain: k, tw, td: d as f64 * 0.01 })
}

fn inputs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn naive_moving_average(v: &[f64], w: usize) -> Vec<f64> {
    let (before, after) = ((w - 1) / 2, w / 2);
    (0..v.len())
        .map(|k| {
            let lo = k.saturating_sub(before);
            let hi = (k + after).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn moving_average_matches_naive(v in prop::collection::vec(-100.0f64..100.0, 1..80), w in 1usize..12) {
        prop_assume!(w <= v.len());
        let got = moving_average(&series(v.clone(), 0.03), w).unwrap();
        for (a, b) in got.values().iter().zip(naive_moving_average(&v, w)) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn minmax_round_trip(v in prop::collection::vec(-1e3f64..1e3, 2..50), x in -1e3f64..1e3) {
        let m = MinMax::fit(&v);
        prop_assume!(!m.is_degenerate());
        prop_assert!((m.invert(m.apply(x)) - x).abs() <= 1e-12 * (1.0 + x.abs()) * 1e3);
    }

    #[test]
    fn rmse_bounds_mae(p in prop::collection::vec(-10.0f64..10.0, 3..40), shift in 0.1f64..3.0) {
        let actual: Vec<f64> = p.iter().enumerate().map(|(i, v)| v + shift * (i as f64).sin()).collect();
        prop_assume!(actual.iter().any(|a| (a - actual[0]).abs() > 1e-9));
        let m = metrics_from_slices(&p, &actual).unwrap();
        prop_assert!(m.rmse + 1e-12 >= m.mae);
    }

    #[test]
    fn first_order_is_linear(m in model(), u in inputs(300), v in inputs(300), alpha in -3.0f64..3.0) {
        let dt = 0.01;
        let y = |x: &[f64]| simulate_first_order(&m, &series(x.to_vec(), dt), 0.0).into_values();
        let (yu, yv) = (y(&u), y(&v));
        let scaled: Vec<f64> = u.iter().map(|x| alpha * x).collect();
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        for k in 0..u.len() {
            let scale = 1.0 + yu[k].abs() + yv[k].abs();
            prop_assert!((y(&scaled)[k] - alpha * yu[k]).abs() <= 1e-12 * scale * (1.0 + alpha.abs()));
            prop_assert!((y(&sum)[k] - yu[k] - yv[k]).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn delay_is_a_pure_shift(m in model(), u in inputs(200)) {
        let dt = 0.01;
        let d = (m.td / dt).round() as usize;
        let delayed = simulate_first_order(&m, &series(u.clone(), dt), 0.0).into_values();
        let undelayed = simulate_first_order(&FirstOrderDelayModel { td: 0.0, ..m }, &series(u, dt), 0.0).into_values();
        for k in 0..delayed.len() {
            let expected = if k >= d { undelayed[k - d] } else { 0.0 };
            prop_assert_eq!(delayed[k].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn constant_input_reaches_gain(m in model(), level in -5.0f64..5.0) {
        let dt = 0.01;
        let n = ((7.0 * m.tw + m.td) / dt).ceil() as usize + 2;
        let y = simulate_first_order(&m, &series(vec![level; n], dt), 0.0).into_values();
        let target = m.k_gain * level;
        prop_assert!((y[n - 1] - target).abs() <= 1e-3 * target.abs() + 1e-12);
    }

    #[test]
    fn arx_matches_pseudo_inverse(u in inputs(120), noise in inputs(120), na in 1usize..3, nb in 1usize..3, nk in 0usize..3) {
        // An output with its own dynamics so the regressors are full rank.
        let mut y = vec![0.0; u.len()];
        for t in 2..u.len() {
            y[t] = 0.6 * y[t - 1] - 0.1 * y[t - 2] + 0.5 * u[t - 1] + 0.2 * noise[t];
        }
        let (m, _) = fit_arx(&series(u.clone(), 0.03), &series(y.clone(), 0.03), na, nb, nk).unwrap();
        let start = na.max(nb + nk - 1).max(nk);
        let rows = u.len() - start;
        let phi = DMatrix::from_fn(rows, na + nb, |r, c| {
            let t = r + start;
            if c < na { -y[t - c - 1] } else { u[t - nk - (c - na)] }
        });
        let target = DMatrix::from_fn(rows, 1, |r, _| y[r + start]);
        let theta = phi.pseudo_inverse(1e-14).unwrap() * target;
        let got: Vec<f64> = m.a.iter().chain(&m.b).copied().collect();
        for (g, t) in got.iter().zip(theta.iter()) {
            prop_assert!((g - t).abs() <= 1e-9 * (1.0 + t.abs()), "{} vs {}", g, t);
        }
    }

    #[test]
    fn split_is_a_partition(n in 20usize..500, frac in 0.1f64..0.9, seed in any::<u64>()) {
        let (train, validation) = split_indices(n, frac, seed).unwrap();
        prop_assert!(validation.len() >= 2);
        let mut all: Vec<usize> = train.iter().chain(&validation).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, frac, seed).unwrap(), (train, validation));
    }

    #[test]
    fn pid_without_i_and_d_is_proportional(kp in 0.0f64..1e4, sp in -10.0f64..10.0, y in -10.0f64..10.0, bias in -1e3f64..1e3) {
        let g = PidGains { kp, ki: 0.0, kd: 0.0 };
        let lim = ActuatorLimits { min: f64::MIN, max: f64::MAX };
        let (_, u) = pid_step(&PidState::new(bias), sp, y, &g, 0.01, lim).unwrap();
        prop_assert_eq!(u, bias + kp * (sp - y));
    }

    #[test]
    fn pid_output_respects_limits(
        kp in 0.0f64..1e4, ki in 0.0f64..1e4, kd in 0.0f64..100.0,
        errors in prop::collection::vec(-5.0f64..5.0, 1..60),
    ) {
        let g = PidGains { kp, ki, kd };
        let lim = ActuatorLimits::default();
        let mut s = PidState::new(3000.0);
        for (k, e) in errors.iter().enumerate() {
            let before = s.integral;
            let (next, u) = pid_step(&s, *e, 0.1 * k as f64, &g, 0.01, lim).unwrap();
            prop_assert!(u >= lim.min && u <= lim.max);
            if u == lim.min || u == lim.max {
                prop_assert_eq!(next.integral, before);
            }
            s = next;
        }
    }

    #[test]
    fn layer_schedule_is_exact(t in 0.0f64..40.0, ps in 0.0f64..3.0, spl in 0.5f64..4.0, layers in 1usize..8) {
        let cfg = LoopConfig { print_start: ps, seconds_per_layer: spl, layers, ..LoopConfig::default() };
        let expected = if t < ps { 0.0 } else { (1.0 + ((t - ps) / spl).floor()).min(layers as f64) };
        prop_assert_eq!(cfg.layer_at(t).to_bits(), expected.to_bits());
    }
}

fn bead_protocol(ep: f64, wfs: f64, layers: usize) -> ExperimentProtocol {
    let seg = |lp| Segment { length_mm: Some(20.0), duration_s: None, lp, ts: 10.0, ep, wfs };
    ExperimentProtocol {
        name: "p".into(),
        segments: vec![seg(2800.0), seg(3200.0), seg(2900.0)],
        layers,
        seconds_per_layer: None,
        cold_substrate: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ep_and_wfs_are_inert(ep in 0.0f64..300.0, wfs in 0.5f64..4.0, seed in 0u64..1000) {
        let cfg = PlantConfig { seed, ..PlantConfig::default() };
        let a = run_open_loop(&cfg, &bead_protocol(100.0, 2.0, 2)).unwrap();
        let b = run_open_loop(&cfg, &bead_protocol(ep, wfs, 2)).unwrap();
        for (x, y) in [(&a.mpw, &b.mpw), (&a.mpl, &b.mpl), (&a.mpt, &b.mpt), (&a.bw, &b.bw)] {
            prop_assert!(x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn pyrometer_never_reports_below_floor(seed in 0u64..1000, cold in any::<bool>()) {
        let cfg = PlantConfig { seed, ..PlantConfig::default() };
        let proto = ExperimentProtocol { cold_substrate: cold, ..bead_protocol(100.0, 2.0, 3) };
        let r = run_open_loop(&cfg, &proto).unwrap();
        prop_assert!(r.mpt.values().iter().all(|&v| v == 0.0 || v >= cfg.pyrometer_floor));
    }

    #[test]
    fn plant_is_deterministic(seed in any::<u64>()) {
        let cfg = PlantConfig { seed, ..PlantConfig::default() };
        let proto = bead_protocol(100.0, 2.0, 2);
        prop_assert_eq!(run_open_loop(&cfg, &proto).unwrap(), run_open_loop(&cfg, &proto).unwrap());
    }
}

#[test]
fn layer_effects_are_monotone() {
    let r = run_open_loop(&PlantConfig::noise_free(), &bead_protocol(100.0, 2.0, 5)).unwrap();
    let per_layer = |s: &TimeSeries| -> Vec<f64> {
        (1..=5)
            .map(|n| {
                let v: Vec<f64> = (0..s.len()).filter(|&k| r.layer.values()[k] == n as f64).map(|k| s.values()[k]).collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    };
    let (mpw, mpl) = (per_layer(&r.mpw), per_layer(&r.mpl));
    assert!(mpw.windows(2).all(|w| w[1] < w[0]), "{mpw:?}");
    assert!(mpl.windows(2).all(|w| w[1] > w[0]), "{mpl:?}");
}

/// Random blobs: a few overlapping discs and rectangles plus stray pixels.
fn random_mask() -> impl Strategy<Value = Mask> {
    (
        4usize..=64,
        4usize..=64,
        prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.5f64..12.0, any::<bool>()), 1..4),
        prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 0..6),
    )
        .prop_map(|(w, h, shapes, strays)| {
            Mask::from_fn(w, h, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                shapes.iter().any(|&(cx, cy, r, disc)| {
                    let (cx, cy) = (cx * w as f64, cy * h as f64);
                    if disc {
                        (xf - cx).powi(2) + (yf - cy).powi(2) <= r * r
                    } else {
                        (xf - cx).abs() <= r && (yf - cy).abs() <= r / 2.0
                    }
                }) || strays.iter().any(|&(sx, sy)| x == (sx * w as f64) as usize && y == (sy * h as f64) as usize)
            })
            .unwrap()
        })
}

/// Exhaustive scan: every foreground center, distance to every background
/// pixel including a one-pixel ring outside the frame.
fn inscribed_oracle(m: &Mask) -> f64 {
    let (w, h) = (m.width() as i64, m.height() as i64);
    let fg = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h && m.get(x as usize, y as usize);
    let mut best = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if !fg(x, y) {
                continue;
            }
            let mut d2 = f64::INFINITY;
            for by in -1..=h {
                for bx in -1..=w {
                    if !fg(bx, by) {
                        d2 = d2.min(((bx - x).pow(2) + (by - y).pow(2)) as f64);
                    }
                }
            }
            best = best.max(d2);
        }
    }
    2.0 * best.sqrt() - 1.0
}

/// Smallest covering circle over all pair and triple candidates. Only pixels
/// extreme in both their row and their column can be hull vertices.
fn enclosing_oracle(m: &Mask) -> f64 {
    let pts = m.foreground();
    let row_extreme = |p: &(f64, f64)| {
        let row: Vec<f64> = pts.iter().filter(|q| q.1 == p.1).map(|q| q.0).collect();
        p.0 == row.iter().cloned().fold(f64::INFINITY, f64::min) || p.0 == row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    let col_extreme = |p: &(f64, f64)| {
        let col: Vec<f64> = pts.iter().filter(|q| q.0 == p.0).map(|q| q.1).collect();
        p.1 == col.iter().cloned().fold(f64::INFINITY, f64::min) || p.1 == col.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    let cand: Vec<(f64, f64)> = pts.iter().filter(|p| row_extreme(p) && col_extreme(p)).copied().collect();
    let covers = |cx: f64, cy: f64, r: f64| cand.iter().all(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt() <= r + 1e-7);
    let mut best = if cand.len() == 1 { 0.0 } else { f64::INFINITY };
    for i in 0..cand.len() {
        for j in i + 1..cand.len() {
            let (a, b) = (cand[i], cand[j]);
            let (cx, cy) = ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0);
            let r = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() / 2.0;
            if r < best && covers(cx, cy, r) {
                best = r;
            }
            for c in &cand[j + 1..] {
                let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
                if d.abs() < 1e-12 {
                    continue;
                }
                let sa = a.0 * a.0 + a.1 * a.1;
                let sb = b.0 * b.0 + b.1 * b.1;
                let sc = c.0 * c.0 + c.1 * c.1;
                let ux = (sa * (b.1 - c.1) + sb * (c.1 - a.1) + sc * (a.1 - b.1)) / d;
                let uy = (sa * (c.0 - b.0) + sb * (a.0 - c.0) + sc * (b.0 - a.0)) / d;
                let r = ((a.0 - ux).powi(2) + (a.1 - uy).powi(2)).sqrt();
                if r < best && covers(ux, uy, r) {
                    best = r;
                }
            }
        }
    }
    2.0 * best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn inscribed_matches_exhaustive_scan(m in random_mask()) {
        prop_assume!(m.count() > 0);
        let got = largest_inscribed_circle(&m).unwrap();
        prop_assert!((got - inscribed_oracle(&m)).abs() <= 1e-9);
    }

    #[test]
    fn enclosing_matches_exhaustive_candidates(m in random_mask()) {
        prop_assume!(m.count() > 0);
        let got = smallest_enclosing_circle(&m).unwrap();
        prop_assert!((got - enclosing_oracle(&m)).abs() <= 1e-6, "{} vs {}", got, enclosing_oracle(&m));
    }

    #[test]
    fn inscribed_never_exceeds_enclosing(m in random_mask()) {
        prop_assume!(m.count() > 0);
        prop_assert!(largest_inscribed_circle(&m).unwrap() <= smallest_enclosing_circle(&m).unwrap() + 1.0);
    }

    #[test]
    fn diameters_are_translation_invariant(m in random_mask(), dx in 0usize..6, dy in 0usize..6) {
        prop_assume!(m.count() > 0);
        // Embedded with a background margin so border contact cannot change.
        let place = |ox: usize, oy: usize| {
            Mask::from_fn(m.width() + 8, m.height() + 8, |x, y| {
                x >= ox && y >= oy && x - ox < m.width() && y - oy < m.height() && m.get(x - ox, y - oy)
            })
            .unwrap()
        };
        let (a, b) = (place(1, 1), place(1 + dx, 1 + dy));
        prop_assert_eq!(largest_inscribed_circle(&a).unwrap(), largest_inscribed_circle(&b).unwrap());
        prop_assert!((smallest_enclosing_circle(&a).unwrap() - smallest_enclosing_circle(&b).unwrap()).abs() < 1e-9);
    }
}
