// quick throwaway benchmark
use cnnreg::network::{Network, NetworkConfig, Tensor};
use std::time::Instant;

fn main() {
    let cfg = NetworkConfig::desk();
    let net = Network::init(&cfg, 0).unwrap();
    // patch-sized forward+backward (training path)
    let patch = Tensor::new(2, [17, 17, 17], vec![0.3; 2 * 17usize.pow(3)]).unwrap();
    let t0 = Instant::now();
    let iters = 200;
    for _ in 0..iters {
        let cache = net.forward_cached(&patch).unwrap();
        let _ = net.patch_param_gradients(&cache, 1.0).unwrap();
    }
    println!("patch fwd+bwd: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);

    // full-volume forward + input gradient (registration path)
    let vol = Tensor::new(2, [40, 40, 40], vec![0.3; 2 * 40usize.pow(3)]).unwrap();
    let t0 = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let cache = net.forward_cached(&vol).unwrap();
        let _ = net.input_gradient_cached(&cache).unwrap();
    }
    println!("40^3 fwd+input-grad: {:.3} ms", t0.elapsed().as_secs_f64() * 1000.0 / iters as f64);
}
