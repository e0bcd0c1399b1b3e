fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(surgisim_cli::commands::main_with(&args));
}
