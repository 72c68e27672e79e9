// temporary debug probe
use hybrid_cs::linalg::Schedule;
use hybrid_cs::sdp_steering::*;
use hybrid_cs::smooth_steering::Segment;
use nalgebra::{dmatrix, DMatrix};

fn scalar_segment(a: f64, b: f64, q: f64, t0: f64, tf: f64, dt: f64) -> Segment {
    Segment::new(
        Schedule::constant(DMatrix::from_element(1, 1, a)),
        Schedule::constant(DMatrix::from_element(1, 1, b)),
        Schedule::constant(DMatrix::from_element(1, 1, q)),
        t0, tf, dt,
    )
}

#[test]
fn dbg_rank_deficient() {
    let seg1 = scalar_segment(0.1, 1.0, 0.0, 0.0, 0.5, 1e-3);
    let seg2 = Segment::new(
        Schedule::constant(dmatrix![0.0, 0.3; -0.3, 0.0]),
        Schedule::constant(dmatrix![1.0, 0.0; 0.0, 1.0]),
        Schedule::constant(DMatrix::zeros(2, 2)),
        0.5, 1.0, 1e-3,
    );
    let xi = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    let p = SdpProblem::from_segments(
        &seg1, &seg2, &xi,
        &DMatrix::from_element(1, 1, 0.3),
        &dmatrix![0.4, 0.05; 0.05, 0.35],
        0.5,
    ).unwrap();
    match solve_sdp(&p) {
        Ok(sol) => println!("OK obj {} iters {} gnorm {:e}", sol.objective, sol.iterations, sol.kkt_residual.gradient_norm),
        Err(e) => println!("ERR {e:?}"),
    }
}
