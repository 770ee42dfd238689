// JSON mapping for the domain records. Optional fields are omitted when
// absent so that the serialized form is canonical.

#pragma once

#include <json.hpp>

#include "mtcd/protocol.hpp"

namespace mtcd {

void to_json(nlohmann::json& j, const DataRef& ref);
void from_json(const nlohmann::json& j, DataRef& ref);
void to_json(nlohmann::json& j, const TaskDescriptor& task);
void from_json(const nlohmann::json& j, TaskDescriptor& task);
void to_json(nlohmann::json& j, const TaskResult& result);
void from_json(const nlohmann::json& j, TaskResult& result);
void to_json(nlohmann::json& j, const DispatcherStats& stats);
void from_json(const nlohmann::json& j, DispatcherStats& stats);

}  // namespace mtcd
