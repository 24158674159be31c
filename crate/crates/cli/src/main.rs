fn main() { std::process::exit(e4s_cli::run(std::env::args().collect())); }
