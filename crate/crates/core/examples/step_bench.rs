#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::time::Instant;
use vesselnet::ensemble::ModelHyperparams;
use vesselnet::network::VesselNet;
use vesselnet::tensor::rng_gaussian;
use vesselnet::Rng;

fn main() {
    let hyper = ModelHyperparams {
        retention_prob: 0.7,
        l2: 1e-3,
        hidden_units: 128,
        seed: 1,
    };
    let mut rng = Rng::new(1);
    let mut net: VesselNet = VesselNet::build(&hyper, &mut rng).unwrap();
    let b = 200;
    let x = rng_gaussian(&mut rng, &[b, 3, 31, 31], 0.5, 0.2);
    let labels: Vec<usize> = (0..b).map(|i| i % 2).collect();
    for _ in 0..3 {
        let t = Instant::now();
        let loss = net.loss_and_grads(&x, &labels, 1e-3, &mut rng).unwrap();
        let dt = t.elapsed().as_secs_f64();
        println!(
            "train step {b}: {dt:.3}s  ({:.2} ms/sample) loss {loss}",
            dt * 1e3 / b as f64
        );
    }
    let t = Instant::now();
    net.predict(&x).unwrap();
    println!("eval {b}: {:.3}s", t.elapsed().as_secs_f64());
}
