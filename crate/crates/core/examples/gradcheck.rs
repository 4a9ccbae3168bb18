//! Finite-difference check of every backward rule, clean and with a corrupted op.

use chebyodo::gradcheck::{run_gradcheck, GradcheckConfig};

fn main() -> chebyodo::Result<()> {
    let clean = run_gradcheck(&GradcheckConfig::default())?;
    clean.write_table(&mut std::io::stdout())?;
    println!("clean run passed: {}", clean.passed());

    let faulty = run_gradcheck(&GradcheckConfig { fault: Some("arccos".into()), ..GradcheckConfig::default() })?;
    println!("with a corrupted arccos rule, failing ops: {:?}", faulty.failing_ops());
    Ok(())
}
