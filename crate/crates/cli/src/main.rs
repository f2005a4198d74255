fn main() {
    std::process::exit(rnvkit::run());
}

mod cli;
use cli as rnvkit;
