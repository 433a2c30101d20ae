//! What a squeeze-and-excitation block does to a feature map: one gate in
//! (0, 1) per channel, applied uniformly over the plane.
//!
//! cargo run --release --example se_gating

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ressenet::nn::{Ctx, Mode, ParamStore, SeBlock};
use ressenet::{Tape, Tensor};

fn main() -> ressenet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (c, h, w) = (32, 8, 8);
    let mut store = ParamStore::<f64>::new();
    let se = SeBlock::new(&mut store, "se", c, 16, &mut rng)?;
    println!(
        "channels {c}, hidden width {}, {} parameters",
        se.hidden,
        se.param_count()
    );

    let x = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-2.0..2.0));
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let (gate, y) = {
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        (se.excitation(&mut ctx, xv)?, se.forward(&mut ctx, xv)?)
    };
    let gate = tape.value(gate).detach();
    let y = tape.value(y).detach();

    let plane = h * w;
    for ch in 0..6 {
        let ratios: Vec<f64> = (0..plane)
            .map(|i| y.data()[ch * plane + i] / x.data()[ch * plane + i])
            .collect();
        let spread = ratios.iter().fold(0.0f64, |m, r| m.max((r - ratios[0]).abs()));
        println!(
            "channel {ch}: gate {:.6}  output/input spread {spread:.1e}",
            gate.data()[ch]
        );
    }

    for id in [se.reduce.weight, se.reduce.bias, se.expand.weight, se.expand.bias] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = {
        let mut ctx = Ctx::new(&mut tape, &mut store, Mode::Eval);
        se.forward(&mut ctx, xv)?
    };
    let halved = tape
        .value(y)
        .data()
        .iter()
        .zip(x.data())
        .all(|(a, b)| *a == 0.5 * b);
    println!("zeroed weights halve the input exactly: {halved}");
    Ok(())
}
