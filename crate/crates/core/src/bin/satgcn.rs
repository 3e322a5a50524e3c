use std::io::Write;

fn main() {
    // FE_THREADS=0 or unset: rayon picks the thread count
    if let Some(n) = std::env::var("FE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let mut stdout = std::io::stdout().lock();
    let code = satgcn::cli::run(std::env::args_os(), &mut stdout);
    let _ = stdout.flush();
    std::process::exit(code);
}
