//! Feeds a saturating accuracy curve to the activation controller and prints
//! when each adapter layer switches on.

use fedsparse::sal::SalState;

fn main() -> fedsparse::Result<()> {
    let depth = 4;
    let mut sal = SalState::new(3, 0.01, depth)?;
    println!("round  accuracy  queue_mean  factor   event");
    for round in 1..=30 {
        let acc = 0.9 - 0.6 * (-(round as f64) / 4.0).exp();
        let mean = sal.queue.is_full().then(|| sal.queue.mean().unwrap_or(0.0));
        let event = sal.observe(acc);
        let factor = mean.map(|m| acc - m);
        let fmt = |v: Option<f64>| v.map_or("      -".to_string(), |x| format!("{x:7.4}"));
        let note = event.map_or(String::new(), |e| format!("activate layer {}", e.layer));
        println!("{round:>5}  {acc:8.4}  {}  {}  {note}", fmt(mean), fmt(factor));
        if sal.is_exhausted() && event.is_some() {
            println!("every layer is active");
            break;
        }
    }
    Ok(())
}
