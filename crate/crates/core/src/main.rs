fn main() {
    std::process::exit(prism_rec::cli::run(std::env::args_os()));
}
