fn main() {
    std::process::exit(stkern::cli::run(std::env::args_os()));
}
