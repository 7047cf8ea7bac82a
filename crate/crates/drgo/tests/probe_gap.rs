mod common;

use drgo::dro::{random_simplex, sinkhorn_distance, SinkhornParams};
use drgo::matrix::Matrix;
use drgo::rng::{substream, Stream};
use rand::Rng;

#[test]
fn probe_entropic_gap() {
    let mut rng = substream(0, Stream::Eval, 42);
    let params = SinkhornParams {
        lambda: 1e-3,
        max_iter: 200_000,
        tol: 1e-10,
    };
    let mut worst_value = 0.0f64;
    let mut worst_cost = 0.0f64;
    for trial in 0..20 {
        let m = rng.random_range(2..=6);
        let n = rng.random_range(2..=6);
        let dim = 2;
        let pts = |rng: &mut rand_chacha::ChaCha8Rng, count: usize| {
            Matrix::from_vec(
                count,
                dim,
                (0..count * dim).map(|_| rng.random::<f64>() * 2.0).collect(),
            )
        };
        let p_pts = pts(&mut rng, m);
        let q_pts = pts(&mut rng, n);
        let p_w = random_simplex(m, &mut rng);
        let q_w = random_simplex(n, &mut rng);
        let exact = common::exact_ot_cost(&p_pts, &p_w, &q_pts, &q_w);
        let sk = sinkhorn_distance(&p_pts, &p_w, &q_pts, &q_w, &params).unwrap();
        let dv = (sk.value - exact).abs();
        let dc = (sk.transport_cost - exact).abs();
        println!(
            "trial {trial}: exact {exact:.6} value {:.6} (gap {dv:.2e}) cost {:.6} (gap {dc:.2e}) kl {:.3}",
            sk.value, sk.transport_cost, sk.kl_term
        );
        worst_value = worst_value.max(dv);
        worst_cost = worst_cost.max(dc);
    }
    println!("worst value gap {worst_value:.3e}; worst cost gap {worst_cost:.3e}");
}
