//! Exports the built-in scripted scenarios as JSON fixture files, one per
//! scenario id, so runs can reference them by path instead of `builtin:`.
//!
//! Usage: cargo run -p parathink --example export_fixtures [out_dir]

use parathink::backends::sim::scenarios;

fn main() -> std::io::Result<()> {
    let out_dir = std::env::args().nth(1).unwrap_or_else(|| "fixtures".to_string());
    std::fs::create_dir_all(&out_dir)?;
    let base = scenarios::DEFAULT_BASE_SEED;
    let scripts = [
        scenarios::basic_script(),
        scenarios::branchy_script(base),
        scenarios::eval_suite_script(base),
    ];
    for script in scripts {
        let path = format!("{out_dir}/{}.json", script.scenario_id);
        std::fs::write(&path, serde_json::to_string_pretty(&script).expect("script serializes"))?;
        println!("wrote {path}");
    }
    println!("(longprefix and compress stay builtin-only; regenerate with a different base seed if needed)");
    Ok(())
}
