//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use ressenet::ArchVariant;

pub fn conv(c_in: usize, c_out: usize, k: usize) -> usize {
    c_in * c_out * k * k
}

pub fn bn(c: usize) -> usize {
    2 * c
}

/// Squeeze-and-excitation with biases on both fully connected layers.
pub fn se(c: usize, r: usize) -> usize {
    let h = std::cmp::max(1, c / r);
    c * h + h + h * c + c
}

/// Closed-form trainable parameter count, summed layer by layer without
/// touching the builder.
pub fn params(variant: ArchVariant, depth: usize, classes: usize, r: usize) -> usize {
    let n = (depth - 2) / 6;
    let mut total = conv(3, 16, 3) + bn(16);
    for (g, w) in [16usize, 32, 64].into_iter().enumerate() {
        for b in 0..n {
            let c_in = if g > 0 && b == 0 { w / 2 } else { w };
            total += conv(c_in, w, 3) + bn(w) + conv(w, w, 3) + bn(w);
            if variant == ArchVariant::SeResnet {
                total += se(w, r);
            }
            if c_in != w {
                total += match variant {
                    ArchVariant::NoBridge => 0,
                    ArchVariant::Baseline | ArchVariant::SeResnet => conv(c_in, w, 1) + bn(w),
                    ArchVariant::ResSeNet | ArchVariant::SeAllSkips => conv(c_in, w, 1) + bn(w) + se(w, r),
                    ArchVariant::ResSeNetPreDown => conv(c_in, w, 1) + bn(w) + se(c_in, r),
                };
            } else if variant == ArchVariant::SeAllSkips {
                total += se(w, r);
            }
        }
    }
    total + 64 * classes + classes
}

/// The two bridge SE blocks of an after-downsample network.
pub fn bridge_se(r: usize) -> usize {
    se(32, r) + se(64, r)
}
