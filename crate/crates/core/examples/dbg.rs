//! Scratch: where do poorly-explained pixels live at an exact-truth state?
use twoview::correlation::{build_pyramid, correlation_map};
use twoview::features::{extract_features, quarter_gray};
use twoview::geometry::{exp_map, log_map, DepthMap};
use twoview::solver::{state_uncertainty, SolverConfig, SolverState};
use twoview::synth::{gen_scene, SceneSpec};

fn main() {
    let spec = SceneSpec { seed: 34, ..Default::default() };
    let pair = gen_scene(&spec).unwrap();
    let cfg = SolverConfig::default();
    let f_t = extract_features(&pair.target, &cfg.backend).unwrap();
    let f_s = extract_features(&pair.source, &cfg.backend).unwrap();
    let pyramid = build_pyramid(&f_t, &f_s).unwrap();
    let (hq, wq) = pyramid.dims();
    let k_q = pair.k.to_quarter();
    let d_gt = pair.depth_gt.at(10, 10).unwrap();
    let state = SolverState {
        inv_depth: DepthMap::constant(hq, wq, 1.0 / d_gt).unwrap(),
        pose: log_map(&pair.pose_gt),
        iter: 0,
        ll: f64::NEG_INFINITY,
        level: 0,
    };
    let tq = quarter_gray(&pair.target);
    let sq = quarter_gray(&pair.source);
    let _unc = state_uncertainty(&tq, &sq, &state, &k_q, &cfg).unwrap();
    let corr = correlation_map(&pyramid, &state.depth(), &exp_map(&state.pose).unwrap(), &k_q, 0).unwrap();
    println!("grid {hq}x{wq}");
    // ASCII map: '.' invalid, digits = round(c*9) clamped
    for r in 0..hq {
        let mut row = String::new();
        for c in 0..wq {
            if !corr.valid.at(r, c) {
                row.push('.');
            } else {
                let v = corr.values.at(r, c);
                let d = ((v * 9.0).round() as i64).clamp(0, 9) as u8;
                row.push((b'0' + d) as char);
            }
        }
        println!("{row}");
    }
    // stats: distance-to-invalid vs c
    let mut border_bad = 0;
    let mut interior_bad = 0;
    for r in 0..hq {
        for c in 0..wq {
            if !corr.valid.at(r, c) { continue; }
            if corr.values.at(r, c) >= 0.5 { continue; }
            // distance 1 ring check: any invalid or frame edge within 2?
            let mut near_edge = false;
            for dr in -2i64..=2 {
                for dc in -2i64..=2 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= hq as i64 || cc >= wq as i64 {
                        near_edge = true;
                    } else if !corr.valid.at(rr as usize, cc as usize) {
                        near_edge = true;
                    }
                }
            }
            if near_edge { border_bad += 1 } else { interior_bad += 1 }
        }
    }
    println!("c<0.5 pixels: near-boundary={border_bad} interior={interior_bad}");
}
