use std::time::Instant;

fn bench_f32(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f32; m * k];
    let b = vec![1.0f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9
}

fn bench_f64(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = vec![1.0f64; m * k];
    let b = vec![1.0f64; k * n];
    let mut c = vec![0.0f64; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9
}

fn main() {
    // conv1 fwd batch 64: W(32x27) @ col(27x65536); conv2: (64x288)@(288x16384)
    // conv2 dW: (64x16384)@(16384x288); fc1: (64x4096)@(4096x128)
    println!("f32 conv1-like  (32,27,65536):  {:6.1} GFLOP/s", bench_f32(32, 27, 65536, 8));
    println!("f32 conv2-like  (64,288,16384): {:6.1} GFLOP/s", bench_f32(64, 288, 16384, 8));
    println!("f32 conv2-dW    (64,16384,288): {:6.1} GFLOP/s", bench_f32(64, 16384, 288, 8));
    println!("f32 fc1-like    (64,4096,128):  {:6.1} GFLOP/s", bench_f32(64, 4096, 128, 32));
    println!("f64 conv2-like  (64,288,16384): {:6.1} GFLOP/s", bench_f64(64, 288, 16384, 4));
    println!("f64 conv2-dW    (64,16384,288): {:6.1} GFLOP/s", bench_f64(64, 16384, 288, 4));
}
