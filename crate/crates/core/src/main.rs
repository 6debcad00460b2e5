use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use dataevolver::cli;

fn main() {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    // In-flight inner loops finish their log lines; the round stays open.
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        eprintln!("warning: no interrupt handler: {e}");
    }
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let code = cli::main_with(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock(), &stop);
    std::process::exit(code);
}
