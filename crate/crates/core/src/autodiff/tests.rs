use super::*;

#[test]
fn linear_loss_gradient_equals_input() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap()).unwrap();
    let mut tape = Tape::with_params(&store);
    let w = tape.param(id);
    let x = tape.constant(Tensor::new(&[3], vec![2.0, -1.0, 0.5]).unwrap());
    let wx = tape.mul(w, x).unwrap();
    let loss = tape.sum(wx);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2.0, -1.0, 0.5]);
    assert!(tape.grad(x).is_none());
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut store = ParamStore::<f32>::new();
    let a = store.add("a", Tensor::scalar(1.0)).unwrap();
    let b = store.add("b", Tensor::full(&[2, 2], 3.0)).unwrap();
    let mut tape = Tape::with_params(&store);
    let va = tape.param(a);
    let _ = tape.param(b);
    let sq = tape.mul(va, va).unwrap();
    tape.backward(sq).unwrap();
    let grads = tape.param_grads();
    assert_eq!(grads[0].1.data(), &[2.0]);
    assert_eq!(grads[1].1.data(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.variable(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn relu_and_identities() {
    let mut tape = Tape::<f32>::new();
    let x = tape.variable(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let zero = tape.constant(Tensor::scalar(0.0));
    let same = tape.add(x, zero).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    // subgradient 0 at the kink
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn scalar_broadcast_gradient_is_reduced() {
    let mut tape = Tape::<f64>::new();
    let x = tape.variable(Tensor::new(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let s = tape.variable(Tensor::scalar(0.5));
    let y = tape.mul(x, s).unwrap();
    let l = tape.sum(y);
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(s).unwrap().data(), &[10.0]);
    assert_eq!(tape.grad(x).unwrap().data(), &[0.5; 4]);
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.add(a, b).is_err());
}

#[test]
fn inference_tape_tracks_nothing() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::scalar(2.0)).unwrap();
    let mut tape = Tape::inference(&store);
    let w = tape.param(id);
    let e = tape.exp(w);
    assert!(!tape.requires_grad(e));
    assert!((tape.value(e).item() - 2f32.exp()).abs() < 1e-6);
}

#[test]
fn shared_parameter_node_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::with_params(&store);
    let a = tape.param(id);
    let b = tape.param(id);
    assert_eq!(a, b);
    let y = tape.mul(a, b).unwrap();
    let z = tape.add(y, a).unwrap();
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(a).unwrap().item(), 7.0);
}
