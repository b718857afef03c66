// Regenerates the bundled corpora. The outputs are committed; this tool
// exists so anyone can verify the files against their pinned hashes.
//
//   make_corpora [out_dir]
//
// Writes pretrain.txt (~2 MB, generic prose, seed 2001) and downstream.txt
// (~1 MB, ship's-log domain, seed 3001), then prints their sha256 digests.
#include <cstdio>
#include <fstream>
#include <string>

#include "ot/data.hpp"
#include "ot/sha256.hpp"

namespace {

int write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) {
    std::fprintf(stderr, "cannot write %s\n", path.c_str());
    return 1;
  }
  out << content;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string dir = argc > 1 ? argv[1] : "data";
  const std::string pretrain = ot::generate_pretrain_text(2001, 2 * 1024 * 1024);
  const std::string downstream =
      ot::generate_downstream_text(3001, 1024 * 1024);
  if (write_file(dir + "/pretrain.txt", pretrain)) return 1;
  if (write_file(dir + "/downstream.txt", downstream)) return 1;
  std::printf("pretrain.txt   %s\n", ot::sha256_hex(pretrain).c_str());
  std::printf("downstream.txt %s\n", ot::sha256_hex(downstream).c_str());
  return 0;
}
