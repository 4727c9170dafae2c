//! Dense matrices, a reverse-mode tape, parameter storage, Adam, and a
//! finite-difference gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck, REL_ERROR_FLOOR,
};
pub use optim::{clip_grad_norm, Adam, AdamSlot};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor2D;

/// Parameter storage precision during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters and optimizer moments kept at full `f64`.
    F64,
    /// Parameters and optimizer moments rounded to `f32` after every update.
    #[default]
    F32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> Tensor2D {
        Tensor2D::row_vector(values).unwrap()
    }

    #[test]
    fn identity_composition_returns_input() {
        let mut tape = Tape::new();
        let x = Tensor2D::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let v = tape.constant(x.clone());
        let same = tape.scale(v, 1.0).unwrap();
        assert_eq!(tape.value(same), &x);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let v = tape.constant(row(&[0.0, 0.0]));
        let s = tape.softmax(v).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_of_one_three() {
        // mean 2, population variance 1 -> (-1, 1)
        let mut tape = Tape::new();
        let v = tape.constant(row(&[1.0, 3.0]));
        let y = tape.layer_norm(v, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor2D::zeros(2, 3));
        let b = tape.constant(Tensor2D::zeros(2, 3));
        match tape.matmul(a, b) {
            Err(crate::Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn checked_mode_reports_non_finite_node() {
        let mut tape = Tape::new();
        let a = tape.constant(row(&[1e300]));
        let err = tape.scale(a, 1e300).unwrap_err();
        assert!(matches!(err, crate::Error::NonFinite { op: "scale", node: 1 }));
        let mut loose = Tape::unchecked();
        let a = loose.constant(row(&[1e300]));
        assert!(loose.scale(a, 1e300).is_ok());
    }

    #[test]
    fn sum_of_squares_gradient_check() {
        let mut store = ParamStore::new();
        store.insert("theta", row(&[1.0, 2.0, 3.0])).unwrap();
        let loss = |tape: &mut Tape, p: &ParamStore| {
            let t = tape.param(p, "theta")?;
            let sq = tape.mul(t, t)?;
            tape.sum(sq)
        };
        let mut tape = Tape::new();
        let root = loss(&mut tape, &store).unwrap();
        let grads = tape.backward(root).unwrap().by_param(&tape);
        assert_eq!(grads["theta"].data(), &[2.0, 4.0, 6.0]);

        let report = grad_check(loss, &store, GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{}", report.max_rel_error());
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        store.insert("w", row(&[0.3, -0.7])).unwrap();
        let loss = |tape: &mut Tape, p: &ParamStore| {
            let w = tape.param(p, "w")?;
            let z = tape.scale(w, 0.0)?;
            let s = tape.sum(z)?;
            let c = tape.constant(Tensor2D::scalar(4.0));
            tape.add(s, c)
        };
        let report = grad_check(loss, &store, GradCheckOptions::default()).unwrap();
        assert!(report.passed());
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.insert("w", row(&[1.0])).unwrap();
        let calls = Cell::new(0.0);
        let loss = |tape: &mut Tape, p: &ParamStore| {
            calls.set(calls.get() + 1.0);
            let w = tape.param(p, "w")?;
            tape.scale(w, calls.get())
        };
        assert!(matches!(
            grad_check(loss, &store, GradCheckOptions::default()),
            Err(crate::Error::Determinism { .. })
        ));
    }
}
