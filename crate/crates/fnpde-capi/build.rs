use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR not set");
    let out = PathBuf::from(&crate_dir).join("include").join("fnpde.h");

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("FNPDE_H".to_owned()),
        documentation: true,
        cpp_compat: true,
        ..Default::default()
    };

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(out);
        }
        Err(err) => {
            println!("cargo:warning=header generation skipped: {err}");
        }
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
