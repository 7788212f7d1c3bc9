use std::time::Instant;

use wastesort::tensor::gemm;
use wastesort::Tensor;
use rand::SeedableRng;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for &(m, k, n) in &[(64, 576, 3136), (256, 64, 3136), (512, 4608, 49), (64, 147, 12544), (1024, 1024, 1024)] {
        let a = Tensor::randn([m, k], 1.0, &mut rng);
        let b = Tensor::randn([k, n], 1.0, &mut rng);
        let _ = gemm(&a, &b, None).unwrap();
        let t = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            std::hint::black_box(gemm(&a, &b, None).unwrap());
        }
        let s = t.elapsed().as_secs_f64() / reps as f64;
        println!("{m}x{k}x{n}: {:.2} ms, {:.1} GFLOP/s", s * 1e3, 2.0 * (m * k * n) as f64 / s / 1e9);
    }
}
