#pragma once

#include "glacier/pipeline/manifest.hpp"
#include "glacier/pipeline/patch.hpp"
#include "glacier/pipeline/split.hpp"
