use std::time::Instant;
use fusedet::tensor::{conv2d, conv2d_backward, matmul, matmul_nt, matmul_tn, Tensor};

fn t(shape: &[usize], seed: u64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f32 / 1000.0 - 0.5).collect())
}

fn bench(name: &str, mflop: f64, mut f: impl FnMut()) {
    let t0 = Instant::now(); let mut reps = 0;
    while t0.elapsed().as_secs_f64() < 0.5 { f(); reps += 1; }
    let per = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{name:30} {:8.3} ms   {:6.1} GFLOP/s", per * 1e3, mflop / per / 1e3);
}

fn main() {
    let x = t(&[8, 64, 64], 1);
    let w = t(&[8, 8, 3, 3], 2);
    let b = t(&[8], 3);
    let dy = t(&[8, 64, 64], 4);
    // conv 8->8 3x3 s1 64x64: 2*64*64*8*8*9 = 37.7 MFLOP
    bench("conv 8->8 3x3 s1 64x64 fwd", 37.7, || { std::hint::black_box(conv2d(&x, &w, Some(&b), 1, 1)); });
    bench("conv 8->8 3x3 s1 64x64 bwd", 75.5, || { std::hint::black_box(conv2d_backward(&x, &w, &dy, 1, 1)); });
    let x16 = t(&[16, 64, 64], 5);
    let w16 = t(&[16, 16, 3, 3], 6);
    let dy16 = t(&[16, 64, 64], 7);
    bench("conv 16->16 3x3 64x64 fwd", 151.0, || { std::hint::black_box(conv2d(&x16, &w16, None, 1, 1)); });
    bench("conv 16->16 3x3 64x64 bwd", 302.0, || { std::hint::black_box(conv2d_backward(&x16, &w16, &dy16, 1, 1)); });
    // attention matmuls
    let a = t(&[256, 128], 8);
    let bm = t(&[128, 128], 9);
    bench("matmul 256x128x128", 2.0 * 256.0 * 128.0 * 128.0 / 1e6, || { std::hint::black_box(matmul(&a, &bm)); });
    let q = t(&[256, 64], 10);
    let k = t(&[256, 64], 11);
    bench("matmul_nt 256x64 x 256x64", 2.0 * 256.0 * 256.0 * 64.0 / 1e6, || { std::hint::black_box(matmul_nt(&q, &k)); });
    let p = t(&[256, 256], 12);
    let v = t(&[256, 128], 13);
    bench("matmul 256x256x128 (attnV)", 2.0 * 256.0 * 256.0 * 128.0 / 1e6, || { std::hint::black_box(matmul(&p, &v)); });
    bench("matmul_tn 256x128^T x 256x256", 2.0 * 256.0 * 128.0 * 256.0 / 1e6, || { std::hint::black_box(matmul_tn(&a, &p)); });
}
