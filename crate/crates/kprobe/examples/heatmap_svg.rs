//! Render an SVG heatmap of where a keep-mask's preserved neurons sit,
//! binned along the unit axis for each (layer, role) row.

use kprobe::ablation::select_random;
use kprobe::report::{heatmap, heatmap_svg};

fn main() {
    let mask = select_random(2, 32, 0.25, 7).expect("mask");
    let density = heatmap(&mask, 8).expect("heatmap");

    for row in &density.rows {
        let bins: Vec<String> = row.bins.iter().map(|v| format!("{v:.2}")).collect();
        println!("L{}/{}: {}", row.layer, row.role, bins.join(" "));
    }

    let svg = heatmap_svg(&density, "random keep-mask, fraction 0.25");
    let path = std::env::temp_dir().join("keep_mask_density.svg");
    std::fs::write(&path, svg).expect("write svg");
    println!("wrote {}", path.display());
}
