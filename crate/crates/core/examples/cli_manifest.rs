//! Drives the command-line front end in-process and shows the reproducibility
//! manifest it writes next to its outputs.

use commodity_sv::cli::{run, RunManifest};

fn main() -> commodity_sv::error::Result<()> {
    let out = std::env::temp_dir().join("commodity-sv-example");
    let out_s = out.to_string_lossy().into_owned();
    let code = run([
        "commodity-sv", "price-cso", "--model", "sv2f", "--curve", "flat:100", "--expiry", "0.25", "--t1", "0.25",
        "--t2", "0.75", "--strikes", "-2:2:1", "--out", &out_s,
    ]);
    println!("exit code {code}");
    print!("{}", std::fs::read_to_string(out.join("cso.csv"))?);
    let m = RunManifest::from_json_file(out.join("manifest.json"))?;
    println!("command {} seed {} hash {}", m.command, m.seed, m.hash);
    Ok(())
}
