use std::time::Instant;
use transwarp::model::{backward, forward, NetSpec, ParamVector};
use transwarp::volume::{Dims, Volume};

fn main() {
    let spec = NetSpec::new(Dims::new(32, 32, 32).unwrap(), (8, 16, 32)).unwrap();
    let mut params = ParamVector::init_seeded(&spec, 1);
    let x = Volume::from_vec(
        spec.in_dims,
        (0..spec.in_dims.n()).map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5).collect(),
    )
    .unwrap();
    // Warm up.
    let t = forward(&spec, &params, &x).unwrap();
    let dl = vec![1e-3; 2 * spec.in_dims.n()];
    let values = params.values.clone();
    backward(&spec, &values, &mut params.grads, &t, Some(&dl), None).unwrap();

    let t0 = Instant::now();
    let reps = 10;
    for _ in 0..reps {
        let tr = forward(&spec, &params, &x).unwrap();
        std::hint::black_box(&tr.probs);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;
    let tr = forward(&spec, &params, &x).unwrap();
    let t1 = Instant::now();
    for _ in 0..reps {
        params.zero_grads();
        backward(&spec, &values, &mut params.grads, &tr, Some(&dl), None).unwrap();
    }
    let bwd = t1.elapsed().as_secs_f64() / reps as f64;
    println!("forward  32^3: {:.1} ms", fwd * 1e3);
    println!("backward 32^3: {:.1} ms", bwd * 1e3);
    println!("pair-step (4 fwd + 2 bwd approx): {:.1} ms", (4.0 * fwd + 2.0 * bwd) * 1e3);
}
