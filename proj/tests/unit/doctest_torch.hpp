#pragma once

// c10's logging header defines a glog-style CHECK; doctest's must win.
#ifdef CHECK
#undef CHECK
#endif
#include <doctest.h>
