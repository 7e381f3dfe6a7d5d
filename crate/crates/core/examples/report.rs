//! Renders a low-resource results table, its CSV form and a line plot from
//! a handful of evaluation runs.

use cmkt::evaluation::{plot_svg, report, EvalRun, Layout, TrainSize};

fn main() -> cmkt::Result<()> {
    let mut runs = Vec::new();
    for (method, base) in [("MLM", 0.50), ("CMCL", 0.53), ("CMCL+PSA+ANS", 0.55)] {
        for dataset in ["PIQA", "CSQA", "VP"] {
            for (size, bump) in [(64, 0.0), (128, 0.02)] {
                let accs = (0..5).map(|i| base + bump + 0.004 * i as f64).collect();
                runs.push(EvalRun::new(method, dataset, TrainSize::Low(size), (0..5).collect(), accs)?);
            }
        }
    }
    let rendered = report(&runs, Layout::LowResource)?;
    println!("{}", rendered.text);
    println!("{}", rendered.csv);
    let svg = plot_svg(&rendered.plot_csv)?;
    println!("plot: {} bytes of SVG", svg.len());
    Ok(())
}
