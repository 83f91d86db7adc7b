use std::io;

fn main() {
    let code = fewshot_core::harness::cli::main_with(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}
