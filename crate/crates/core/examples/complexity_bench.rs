//! Times softmax attention against the linearized kernel as the token count grows.
//!
//! `cargo run --release --example complexity_bench -- 256 512 1024 2048`

use chebyodo::eksa::{complexity_bench, write_bench_csv, BenchConfig};

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() -> chebyodo::Result<()> {
    let grid: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let cfg = BenchConfig {
        n_grid: if grid.is_empty() { vec![128, 256, 512, 1024] } else { grid },
        repetitions: 21,
        ..BenchConfig::default()
    };
    let rows = complexity_bench(&cfg)?;
    write_bench_csv(&rows, &mut std::io::stdout())?;
    for w in rows.windows(2) {
        println!(
            "N {} -> {}: softmax x{:.2}, linear x{:.2}",
            w[0].n,
            w[1].n,
            w[1].t_softmax_us / w[0].t_softmax_us,
            w[1].t_eksa_us / w[0].t_eksa_us
        );
    }
    Ok(())
}
