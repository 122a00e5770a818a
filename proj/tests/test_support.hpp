#pragma once

// Shared helpers for the test binaries: scratch directories under the system
// temp root and access to the repository via the URLTRAN_SOURCE_DIR variable
// that CMake sets on every test.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace test_support {

// Fresh empty directory, wiped if a previous run left one behind. Names must
// be unique across concurrently running test binaries.
inline std::filesystem::path scratch_dir(const std::string& name) {
    std::filesystem::path dir =
        std::filesystem::temp_directory_path() / ("urltran_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline std::filesystem::path source_dir() {
    const char* env = std::getenv("URLTRAN_SOURCE_DIR");
    return env ? std::filesystem::path(env) : std::filesystem::current_path();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace test_support
