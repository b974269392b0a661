//! Independent numerical oracles shared by the integration tests. Nothing
//! here calls into the library's own linear algebra.

#![allow(dead_code)]

use vpflow::flows::{apply_flow, FlowKind, FlowParams};
use vpflow::tensor_ad::{Tape, Tensor};

/// Determinant of a dense row-major `n×n` matrix by LU decomposition with
/// partial pivoting.
pub fn lu_determinant(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut lu = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[i * n + col].abs().total_cmp(&lu[j * n + col].abs()))
            .unwrap();
        if lu[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for j in 0..n {
                lu.swap(pivot * n + j, col * n + j);
            }
            det = -det;
        }
        let d = lu[col * n + col];
        det *= d;
        for i in col + 1..n {
            let f = lu[i * n + col] / d;
            for j in col..n {
                lu[i * n + j] -= f * lu[col * n + j];
            }
        }
    }
    det
}

/// Pushes one point through a flow whose encoder head is `head` (and `gate`
/// for ccLinIAF); returns `(z_T, log_det)`.
pub fn flow_forward(kind: FlowKind, z: &[f64], head: &[f64], gate: Option<&[f64]>) -> (Vec<f64>, f64) {
    let m = z.len();
    let mut tape = Tape::new();
    let zv = tape.constant(Tensor::new(&[1, m], z.to_vec()).unwrap());
    let hv = (!head.is_empty()).then(|| tape.constant(Tensor::new(&[1, head.len()], head.to_vec()).unwrap()));
    let gv = gate.map(|g| tape.constant(Tensor::new(&[1, g.len()], g.to_vec()).unwrap()));
    let params = FlowParams::from_heads(&mut tape, kind, m, hv, gv).unwrap();
    let out = apply_flow(&mut tape, kind, zv, &params).unwrap();
    (tape.value(out.z).data().to_vec(), tape.value(out.log_det).data()[0])
}

/// Central-difference Jacobian `J[i][j] = ∂f_i/∂z_j`, row-major.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64], h: f64) -> Vec<f64> {
    let m = z.len();
    let mut jac = vec![0.0; m * m];
    let mut p = z.to_vec();
    for j in 0..m {
        p[j] = z[j] + h;
        let plus = f(&p);
        p[j] = z[j] - h;
        let minus = f(&p);
        p[j] = z[j];
        for i in 0..m {
            jac[i * m + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    jac
}
