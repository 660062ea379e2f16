#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>
#include <spdlog/spdlog.h>

#include "signadapt/config.hpp"

int main(int argc, char** argv) {
    signadapt::configure_runtime();
    spdlog::set_level(spdlog::level::err);
    doctest::Context context(argc, argv);
    return context.run();
}
