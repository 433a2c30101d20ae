//! Parameter counts across the family and the reductions between networks.
//!
//! cargo run --release --example params_table

use ressenet::arch::{count_params, reduction_report, ArchConfig, ArchVariant};

fn main() -> ressenet::Result<()> {
    let depths = [20, 32, 44, 56, 110];
    print!("{:<22}", "variant");
    for d in depths {
        print!("{:>11}", format!("d={d}"));
    }
    println!();
    for v in ArchVariant::ALL {
        print!("{:<22}", v.name());
        for d in depths {
            print!("{:>11}", count_params(&ArchConfig::new(v, d, 10))?);
        }
        println!();
    }

    let small = ArchConfig::new(ArchVariant::ResSeNet, 44, 10);
    for big in [ArchVariant::Baseline, ArchVariant::SeResnet] {
        let big = ArchConfig::new(big, 110, 10);
        println!(
            "{} has {:.3}% fewer parameters than {}",
            small.label(),
            reduction_report(&small, &big)?,
            big.label()
        );
    }
    Ok(())
}
