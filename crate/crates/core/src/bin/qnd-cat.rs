fn main() {
    std::process::exit(qnd_cat::cli::run(std::env::args_os()));
}
