use hybrid_cs::linalg::Schedule;
use hybrid_cs::sdp_steering::*;
use hybrid_cs::smooth_steering::Segment;
use nalgebra::{dmatrix, DMatrix};

#[test]
fn dbg_invertible() {
    let seg1 = Segment::new(
        Schedule::constant(dmatrix![0.0, 1.0; -0.3, 0.1]),
        Schedule::constant(dmatrix![0.2; 1.0]),
        Schedule::constant(DMatrix::zeros(2, 2)),
        0.0, 0.6, 2e-4,
    );
    let seg2 = Segment::new(
        Schedule::constant(dmatrix![0.1, 0.9; -0.6, 0.0]),
        Schedule::constant(dmatrix![0.0; 0.9]),
        Schedule::constant(DMatrix::zeros(2, 2)),
        0.6, 1.3, 2e-4,
    );
    let xi = dmatrix![-0.6, 0.0; 7.8, -0.6];
    let p = SdpProblem::from_segments(
        &seg1, &seg2, &xi,
        &dmatrix![0.2, 0.0; 0.0, 0.2],
        &dmatrix![0.05, 0.0; 0.0, 0.05],
        0.5,
    ).unwrap();
    match solve_sdp(&p) {
        Ok(sol) => println!("OK obj {} iters {} gnorm {:e}", sol.objective, sol.iterations, sol.kkt_residual.gradient_norm),
        Err(e) => println!("ERR {e:?}"),
    }
}
