fn main() {
    std::process::exit(wtal::cli::run(std::env::args_os()));
}
