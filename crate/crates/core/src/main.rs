use std::io::Write;

fn main() {
    let outcome = omg_core::cli::run(std::env::args_os());
    print!("{}", outcome.summary);
    eprint!("{}", outcome.diagnostic);
    let _ = std::io::stdout().flush();
    std::process::exit(outcome.code);
}
