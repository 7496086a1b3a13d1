// Placeholder entry point; the full CLI lands with the experiment runner.
#include <cstdio>

int main() {
  std::fprintf(stderr, "emblaunder: CLI not wired up yet\n");
  return 2;
}
