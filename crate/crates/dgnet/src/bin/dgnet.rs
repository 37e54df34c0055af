fn main() {
    if let Err(e) = dgnet::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
