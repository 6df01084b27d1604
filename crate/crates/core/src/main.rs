fn main() {
    std::process::exit(convnext_lora::cli::run(std::env::args_os()));
}
