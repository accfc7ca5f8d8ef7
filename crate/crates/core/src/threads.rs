//! `CAPA_THREADS` handling for the E-step.
//!
//! `CAPA_THREADS=1` (or unset) runs the E-step sequentially; any larger value
//! enables the parallel path. Both paths compute each sample column
//! independently, so results are identical either way.

pub(crate) fn e_step_threads() -> usize {
    match std::env::var("CAPA_THREADS") {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => 1,
    }
}
