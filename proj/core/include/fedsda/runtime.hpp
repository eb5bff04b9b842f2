#pragma once

namespace fedsda {

// Training and sampling allocate and free megabyte-sized tensors every step. glibc hands
// those back to the kernel each time by default, which costs more than the arithmetic.
// Call once at program start; a no-op on other C libraries.
void tune_allocator();

} // namespace fedsda
