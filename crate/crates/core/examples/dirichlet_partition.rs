//! Prints client class histograms for several concentration values.

use fedsparse::data::{dirichlet_partition, PartitionSpec};

fn main() -> fedsparse::Result<()> {
    let classes = 10;
    let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, 100)).collect();
    for alpha in [0.1, 1.0, 100.0] {
        let parts = dirichlet_partition(&labels, classes, &PartitionSpec::new(6, alpha, 7))?;
        println!("alpha = {alpha}");
        for (i, part) in parts.iter().enumerate() {
            let mut counts = vec![0; classes];
            part.iter().for_each(|&j| counts[labels[j]] += 1);
            let top = *counts.iter().max().unwrap() as f64 / part.len() as f64;
            println!("  client {i}: {:>4} samples, top class {:>3.0}%  {counts:?}", part.len(), 100.0 * top);
        }
    }
    Ok(())
}
