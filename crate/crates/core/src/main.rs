fn main() { std::process::exit(exitwise::cli::main_with_args(std::env::args_os())); }
