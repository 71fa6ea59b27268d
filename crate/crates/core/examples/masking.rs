//! Draws Dirichlet-budgeted mask plans and shows how the concentration
//! parameter spreads the visible budget across modalities.
//!
//! cargo run --release --example masking

use eomae::datamodel::Modality;
use eomae::masking::{sample_mask_plan, MaskConfig};
use eomae::rng::{stream, Purpose};

fn main() -> eomae::Result<()> {
    let grid = (12, 12);
    for alpha in [0.1, 1.0, 100.0] {
        let cfg = MaskConfig { alpha, ..MaskConfig::default() };
        println!("alpha = {alpha}: budget {} of {} tokens", cfg.budget(grid), 6 * grid.0 * grid.1);
        for i in 0..4 {
            let plan = sample_mask_plan(&cfg, grid, &mut stream(0, Purpose::Masks, i))?;
            let counts: Vec<String> = plan.grids.iter().map(|(m, g)| format!("{}={:<3}", m.name(), g.count_visible())).collect();
            println!("  plan {i}: {}  total {}", counts.join(" "), plan.total_visible());
        }
    }

    // Visible positions of one modality, drawn as a grid.
    let plan = sample_mask_plan(&MaskConfig::default(), grid, &mut stream(0, Purpose::Masks, 99))?;
    let rgb = plan.grid(Modality::Rgb).unwrap();
    println!("RGB visibility (# visible, . masked):");
    for r in 0..rgb.rows {
        let row: String = (0..rgb.cols).map(|c| if rgb.is_visible(r, c) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    println!("plan as JSON: {} bytes", serde_json::to_string(&plan).unwrap().len());
    Ok(())
}
