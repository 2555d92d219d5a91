//! C ABI surface for the fnpde solver. Populated alongside the core crate.
