//! Generates the synthetic suite, writes it to disk and reads one file back.
//!
//! `cargo run --example synthesize_dataset -- <out_dir>`

use std::path::PathBuf;

use chebyodo::data::{read_sequence, suite_specs, synthesize, write_sequence, SuiteConfig};

fn main() -> chebyodo::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("chebyodo_suite"));
    std::fs::create_dir_all(&out)?;
    let cfg = SuiteConfig { duration: 30.0, seed: 11, ..SuiteConfig::default() };
    for (i, spec) in suite_specs(&cfg).iter().enumerate() {
        let seq = synthesize(spec)?;
        let path = out.join(format!("{i:02}_{}.imu.csv", spec.shape.name()));
        write_sequence(&seq, &path)?;
        let end = seq.gt_pos[seq.len() - 1];
        println!(
            "{}: {} samples, speed {:.2} m/s, ends at ({:.1}, {:.1})",
            path.display(),
            seq.len(),
            spec.speed,
            end[0],
            end[1]
        );
    }
    let back = read_sequence(&out.join("00_line.imu.csv"))?;
    println!("re-read 00_line: {} samples at {} Hz", back.len(), back.sample_rate_hz);
    Ok(())
}
