mod common;

use altprint_core::features::estimate_orientation;
use altprint_core::synth::orientation_from_singularities;
use common::oracles::{grating, orientation_error_deg, winding_turns};

pub const ANGLES_DEG: [f64; 6] = [0.0, 30.0, 60.0, 90.0, 120.0, 150.0];

#[test]
fn gratings_at_six_angles() {
    for deg in ANGLES_DEG {
        let f = estimate_orientation(&grating(128, 128, deg, 9.0), 16).unwrap();
        let mut errs = Vec::new();
        for by in 1..f.grid_h - 1 {
            for bx in 1..f.grid_w - 1 {
                errs.push(orientation_error_deg(f.angle(bx, by), deg.to_radians()));
            }
        }
        let mae = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mae <= 3.0, "{deg} deg: mean error {mae}");
    }
}

#[test]
fn singularities_wind_half_a_turn() {
    let field = |cores: Vec<(f64, f64)>, deltas: Vec<(f64, f64)>| {
        move |x: f64, y: f64| orientation_from_singularities(&cores, &deltas, 0.3, x, y).unwrap()
    };
    assert!((winding_turns(field(vec![(10.0, 20.0)], vec![]), 10.0, 20.0, 15.0, 360) - 0.5).abs() < 1e-9);
    assert!((winding_turns(field(vec![], vec![(10.0, 20.0)]), 10.0, 20.0, 15.0, 360) + 0.5).abs() < 1e-9);
    assert!(winding_turns(field(vec![(0.0, 0.0)], vec![(12.0, 0.0)]), 6.0, 0.0, 20.0, 360).abs() < 1e-9);
    // a loop that encloses neither
    assert!(winding_turns(field(vec![(0.0, 0.0)], vec![]), 100.0, 100.0, 10.0, 360).abs() < 1e-9);
}
