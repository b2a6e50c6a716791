//! Regenerates the golden files under `tests/data/`: exhaustive oracle
//! enumerations of the 256-config toy space and text-encoded graphs.
//!
//! cargo run --example golden_files

use std::fs::File;
use std::path::Path;

use graphtune::graph::{encode, SuperGraphTemplate};
use graphtune::kernel::{lower_to_loop_nest, toy_space};
use graphtune::oracle::{enumerate, unique_argmax, write_enumeration, PlatformProfile};

fn main() -> graphtune::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    std::fs::create_dir_all(&dir)?;
    let (spec, space) = toy_space();
    for p in [PlatformProfile::platform_a(), PlatformProfile::platform_b()] {
        let ms = enumerate(&spec, &space, &p)?;
        let path = dir.join(format!("toy_{}.csv", p.name));
        write_enumeration(&ms, File::create(&path)?)?;
        println!("{} argmax {:?} -> {}", p.name, unique_argmax(&ms), path.display());
    }
    let nest = lower_to_loop_nest(&spec, &space, &space.index_config(0)?)?;
    let raw = encode(&nest, None)?;
    let aug = encode(&nest, Some(&SuperGraphTemplate::all()))?;
    std::fs::write(dir.join("toy_raw.graph"), raw.to_text())?;
    std::fs::write(dir.join("toy_augmented.graph"), aug.to_text())?;
    println!("graphs: {} raw nodes, {} augmented nodes", raw.nodes.len(), aug.nodes.len());
    Ok(())
}
