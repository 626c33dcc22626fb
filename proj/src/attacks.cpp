namespace vasa {}
