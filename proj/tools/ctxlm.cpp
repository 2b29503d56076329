#include <cstdio>
int main() { std::puts("ctxlm: placeholder"); }
