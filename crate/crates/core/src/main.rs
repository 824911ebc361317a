fn main() {
    std::process::exit(dynlatent::cli::run(std::env::args_os()));
}
