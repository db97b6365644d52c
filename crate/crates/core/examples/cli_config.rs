//! Driving the experiments from a TOML config, as the binary does.

use iterated_bm::cli::{run, Command, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::temp_dir().join("iterated-bm-example");
    let text = format!(
        r#"
seed = 17
output_dir = "{}"

[paths]
grid_level = 8

[witness]
corrupt_level = 1
thread_samples = 4
"#,
        out.display()
    );
    let config = ExperimentConfig::from_toml(&text)?;
    for cmd in [Command::Paths, Command::Witness] {
        for f in run(cmd, &config)? {
            println!("{cmd:?}: wrote {}", f.display());
        }
    }
    let report = std::fs::read_to_string(out.join("witness.json"))?;
    println!("{}", &report[..report.len().min(600)]);

    let bad = ExperimentConfig::from_toml("[witness]\nepsilon = 2.0\n").unwrap_err();
    println!("rejected config (exit code {}): {bad}", bad.exit_code());
    Ok(())
}
