#![allow(dead_code)]

use gfftree::spectral::{find_h_star, GridParams, SpectralModel};
use std::sync::OnceLock;

pub fn model(d: u32) -> &'static SpectralModel {
    static D2: OnceLock<SpectralModel> = OnceLock::new();
    static D3: OnceLock<SpectralModel> = OnceLock::new();
    let cell = match d {
        2 => &D2,
        3 => &D3,
        _ => panic!("no shared model for d = {d}"),
    };
    cell.get_or_init(|| find_h_star(d, &GridParams::default(), 1e-12).expect("model"))
}
