#pragma once

#include "oracles.hpp"

#include <gtest/gtest.h>
