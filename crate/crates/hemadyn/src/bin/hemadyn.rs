fn main() {
    if let Err(e) = hemadyn::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
