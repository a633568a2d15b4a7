use diffusion_density_wasm::{langevin_impl, mixture_means_impl, pt_curve_impl, reverse_sde_impl};

fn nearest_mean_share(points: &[f64], means: &[f64]) -> Vec<f64> {
    let k = means.len() / 2;
    let mut counts = vec![0usize; k];
    for p in points.chunks(2) {
        let best = (0..k)
            .min_by(|&a, &b| {
                let da = (p[0] - means[2 * a]).powi(2) + (p[1] - means[2 * a + 1]).powi(2);
                let db = (p[0] - means[2 * b]).powi(2) + (p[1] - means[2 * b + 1]).powi(2);
                da.total_cmp(&db)
            })
            .unwrap();
        counts[best] += 1;
    }
    counts.iter().map(|&c| c as f64 / (points.len() / 2) as f64).collect()
}

#[test]
fn samplers_cover_every_component() {
    let means = mixture_means_impl(3, 11, 4.0).unwrap();
    let sde = reverse_sde_impl(3, 4.0, 1500, 200, 11).unwrap();
    assert_eq!(sde.len(), 3000);
    for share in nearest_mean_share(&sde, &means) {
        assert!((share - 1.0 / 3.0).abs() < 0.08, "reverse SDE share {share}");
    }
    let lan = langevin_impl(3, 4.0, 400, 500, 0.05, 11).unwrap();
    assert!(lan.iter().all(|v| v.is_finite()));
    // Langevin may under-populate far modes; just require it to reach each one.
    for share in nearest_mean_share(&lan, &means) {
        assert!(share > 0.02, "langevin share {share}");
    }
}

#[test]
fn pt_curve_tracks_reference_inside_window() {
    // t = 0.00125 gives σ ≈ 0.05
    let rows = pt_curve_impl(0.00125, 7, 0.3, 32).unwrap();
    for r in rows.chunks(3) {
        assert!(r[1].is_finite(), "quadrature failed at {}", r[0]);
        assert!(
            (r[1] - r[2]).abs() / r[2] < 5e-3,
            "x={} quad={} ref={}",
            r[0],
            r[1],
            r[2]
        );
    }
}

#[test]
fn bad_inputs_surface_errors() {
    assert!(reverse_sde_impl(2, 1.0, 10, 0, 0).is_err());
    assert!(pt_curve_impl(-1.0, 3, 0.3, 32).is_err());
}

#[test]
fn pt_curve_marks_uncontained_points() {
    let rows = pt_curve_impl(0.5, 3, 0.3, 32).unwrap();
    assert!(rows.chunks(3).all(|r| r[1].is_nan() && r[2].is_finite()));
}
